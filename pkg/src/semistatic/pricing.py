"""Model-free transport bounds, robust-utility dual and primal values,
indifference prices, call-span restriction and the trivial-case harness.

The dual engine minimizes, over positive scalings of calibrated martingale
measures, the robust divergence minus the scaled claim expectation; the
primal engine maximizes the worst-case expected utility of semistatic
wealth by smoothed subgradient ascent. Both sides share one lattice,
one ambiguity set and one utility specification.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .divergence import (
    AmbiguitySet,
    RobustDivergenceOracle,
    UtilitySpec,
    relative_entropy_integrand,
    utility_integrand,
)
from .errors import (
    AssumptionViolated,
    CrossCheckFailed,
    HarnessLimit,
    InfeasiblePolytope,
    LatticeMismatch,
)
from .market import MarginalSystem
from .optimize import (
    LinearProgram,
    PolytopeOracle,
    SmoothObjective,
    SolveOptions,
    frank_wolfe_min,
    minimize_convex_1d,
    solve_lp,
)
from .polytope import (
    MartingalePolytope,
    PathLattice,
    PathMeasure,
    PrefixNode,
    dynamic_increment_matrix,
    feasibility,
)

_LAMBDA_FLOOR = 1e-8
_LAMBDA_CAP = 2.0**40


def _frozen_line_factory(oracle: RobustDivergenceOracle, lam: float,
                         linear: np.ndarray, div_scale: float = 1.0,
                         const: float = 0.0):
    """Line-search surrogate freezing the divergence mixture at the iterate.

    The surrogate upper-bounds the robust divergence, is tight with matching
    slope at t = 0, and each probe is a single mixture sum with no nested
    weight search.
    """
    spec = oracle.spec
    pmat = oracle.pmat

    def factory(q, d):
        p = oracle.w @ pmat
        pos = p > 0
        pp = p[pos]
        qp = q[pos]
        dp = d[pos]
        cq = float(q @ linear)
        cd = float(d @ linear)

        def phi(t):
            nu = np.maximum(lam * (qp + t * dp), 0.0)
            tot = pp @ spec.phi_star(nu / pp)
            if not np.isfinite(tot):
                return math.inf
            return div_scale * float(tot) + cq + t * cd + const

        return phi

    return factory


# ---------------------------------------------------------------------------
# Payoffs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Payoff:
    """Exotic claim given by its value on every lattice path."""

    values: np.ndarray
    name: str
    params: Tuple[Tuple[str, float], ...] = ()
    growth_ratio: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(v)):
            raise ValueError("payoff must be finite on all paths")
        object.__setattr__(self, "values", v)


def _make_payoff(lattice: PathLattice, values: np.ndarray, name: str, params=()) -> Payoff:
    denom = 1.0 + np.abs(lattice.paths).sum(axis=1)
    ratio = float(np.max(np.abs(values) / denom)) if values.size else 0.0
    return Payoff(values=values, name=name, params=tuple(params), growth_ratio=ratio)


def payoff_table(lattice: PathLattice, values: Sequence[float]) -> Payoff:
    v = np.asarray(values, dtype=float)
    if v.shape != (lattice.n_paths,):
        raise LatticeMismatch("table payoff length must equal the path count")
    return _make_payoff(lattice, v, "table")


def payoff_forward(lattice: PathLattice) -> Payoff:
    v = np.abs(lattice.paths[:, -1] - lattice.s0)
    return _make_payoff(lattice, v, "forward")


def payoff_straddle(lattice: PathLattice, i: int, j: int) -> Payoff:
    n = lattice.n_periods
    if not (1 <= i < j <= n):
        raise ValueError("straddle needs maturities 1 <= i < j <= N")
    v = np.abs(lattice.paths[:, j - 1] - lattice.paths[:, i - 1])
    return _make_payoff(lattice, v, "straddle", (("i", float(i)), ("j", float(j))))


def payoff_asian_call(lattice: PathLattice, strike: float) -> Payoff:
    v = np.maximum(lattice.paths.mean(axis=1) - strike, 0.0)
    return _make_payoff(lattice, v, "asian_call", (("strike", float(strike)),))


def piecewise_linear(knots: Sequence[float], values: Sequence[float]) -> Callable[[np.ndarray], np.ndarray]:
    """Piecewise-linear function through the knots, extended linearly beyond them."""
    k = np.asarray(knots, dtype=float)
    v = np.asarray(values, dtype=float)
    if k.size != v.size or k.size < 1:
        raise ValueError("knots and values must have equal positive length")
    if k.size > 1 and not np.all(np.diff(k) > 0):
        raise ValueError("knots must be strictly increasing")

    def g(x):
        x = np.asarray(x, dtype=float)
        if k.size == 1:
            return np.full_like(x, v[0])
        out = np.interp(x, k, v)
        lo_slope = (v[1] - v[0]) / (k[1] - k[0])
        hi_slope = (v[-1] - v[-2]) / (k[-1] - k[-2])
        out = np.where(x < k[0], v[0] + lo_slope * (x - k[0]), out)
        out = np.where(x > k[-1], v[-1] + hi_slope * (x - k[-1]), out)
        return out

    return g


def payoff_vanilla(lattice: PathLattice, maturity: int,
                   knots: Sequence[float], values: Sequence[float]) -> Payoff:
    if not (1 <= maturity <= lattice.n_periods):
        raise ValueError("vanilla maturity out of range")
    g = piecewise_linear(knots, values)
    v = g(lattice.paths[:, maturity - 1])
    return _make_payoff(lattice, v, "vanilla", (("maturity", float(maturity)),))


def payoff_lookback(lattice: PathLattice) -> Payoff:
    v = lattice.paths.max(axis=1) - lattice.paths[:, -1]
    return _make_payoff(lattice, v, "lookback")


# ---------------------------------------------------------------------------
# Strategies and gains
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DynamicStrategy:
    """Predictable position per prefix node; the time-1 node is a single scalar."""

    values: np.ndarray
    nodes: Tuple[PrefixNode, ...]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (len(self.nodes),):
            raise ValueError("one position per prefix node required")
        if not np.all(np.isfinite(v)):
            raise ValueError("positions must be finite")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class StaticPosition:
    """One payoff vector per maturity, tabulated on that maturity's grid."""

    vectors: Tuple[np.ndarray, ...]

    def __post_init__(self):
        vecs = tuple(np.asarray(v, dtype=float) for v in self.vectors)
        for v in vecs:
            if not np.all(np.isfinite(v)):
                raise ValueError("static positions must be finite")
        object.__setattr__(self, "vectors", vecs)


def _node_lookup(nodes: Sequence[PrefixNode]) -> Dict[Tuple[int, Tuple[float, ...]], int]:
    return {(node.t, node.history): k for k, node in enumerate(nodes)}


def gain_dynamic(h: DynamicStrategy, lattice: PathLattice, path: Sequence[float]) -> float:
    """Trading gain sum_t h(node_t) (x_t - x_{t-1}) along one path, x_0 = s0."""
    path = tuple(float(v) for v in path)
    lookup = _node_lookup(h.nodes)
    prev = lattice.s0
    total = 0.0
    for t in range(1, lattice.n_periods + 1):
        k = lookup[(t, path[: t - 1])]
        total += h.values[k] * (path[t - 1] - prev)
        prev = path[t - 1]
    return total


def gains_dynamic(h: DynamicStrategy, lattice: PathLattice) -> np.ndarray:
    """Vectorized trading gains over all lattice paths."""
    return dynamic_increment_matrix(lattice, list(h.nodes)) @ h.values


def gain_static(f: StaticPosition, sys: MarginalSystem, path: Sequence[float]) -> float:
    """Static gain sum_i (f_i(x_i) - price of f_i), prices from the marginal pmfs."""
    total = 0.0
    for i, marg in enumerate(sys.marginals):
        g = marg.grid.points
        j = int(np.searchsorted(g, path[i]))
        if j >= g.size or g[j] != path[i]:
            raise LatticeMismatch("path coordinate not on the grid")
        total += float(f.vectors[i][j]) - float(marg.pmf @ f.vectors[i])
    return total


def static_design(lattice: PathLattice, sys: MarginalSystem) -> Tuple[np.ndarray, List[Tuple[int, int]]]:
    """Design matrix mapping stacked static vectors to per-path static gains.

    Column (i, g) holds 1{x_i = grid_i[g]} - pmf_i[g]; returns the matrix and
    per-maturity (start, stop) column slices.
    """
    cols = []
    slices = []
    start = 0
    for i, marg in enumerate(sys.marginals):
        k = len(marg.grid)
        onehot = np.zeros((lattice.n_paths, k))
        onehot[np.arange(lattice.n_paths), lattice.path_index[:, i]] = 1.0
        cols.append(onehot - marg.pmf[None, :])
        slices.append((start, start + k))
        start += k
    return np.hstack(cols), slices


def gains_static(f: StaticPosition, lattice: PathLattice, sys: MarginalSystem) -> np.ndarray:
    design, slices = static_design(lattice, sys)
    theta = np.concatenate([np.asarray(v, dtype=float) for v in f.vectors])
    return design @ theta


# ---------------------------------------------------------------------------
# Model-free bounds
# ---------------------------------------------------------------------------

@dataclass
class MotBounds:
    low: float
    high: float
    argmin: PathMeasure
    argmax: PathMeasure


def mot_bounds(poly: MartingalePolytope, psi: Payoff,
               opts: Optional[SolveOptions] = None) -> MotBounds:
    """Extremes of the claim expectation over all calibrated martingale measures."""
    opts = opts or SolveOptions()
    lo = solve_lp(LinearProgram(psi.values, poly.a_eq, poly.b_eq), opts)
    hi = solve_lp(LinearProgram(-psi.values, poly.a_eq, poly.b_eq), opts)
    if lo.status != "optimal" or hi.status != "optimal":
        raise InfeasiblePolytope("no calibrated martingale measure exists")
    return MotBounds(
        low=lo.value,
        high=-hi.value,
        argmin=PathMeasure(poly.lattice, lo.x),
        argmax=PathMeasure(poly.lattice, hi.x),
    )


# ---------------------------------------------------------------------------
# Dual engine
# ---------------------------------------------------------------------------

@dataclass
class DualSolution:
    """Minimizer of the scaled-divergence dual objective."""

    lam: float
    q: PathMeasure
    weights: np.ndarray
    value: float
    gap: float
    lambda_on_edge: bool = False
    converged: bool = True


class DualMachine:
    """Warm-started dual solver for one payoff.

    The inner problem (at fixed scaling) is a Frank-Wolfe minimization over
    the support-restricted martingale polytope; the scaling is handled by a
    golden-section search. The inner value is independent of the initial
    cost x, so evaluations at many x share all inner solves. Exponential
    utility collapses the scaling search to a closed form driven by a single
    entropy minimization.
    """

    def __init__(
        self,
        psi_values: np.ndarray,
        amb: AmbiguitySet,
        util: UtilitySpec,
        poly: MartingalePolytope,
        opts: Optional[SolveOptions] = None,
        *,
        force_generic: bool = False,
    ):
        self.psi = np.asarray(psi_values, dtype=float)
        self.amb = amb
        self.util = util
        self.poly = poly
        self.opts = opts or SolveOptions()
        mask = amb.support()
        try:
            self.oracle_lp = PolytopeOracle(poly.a_eq, poly.b_eq, self.opts, column_mask=mask)
        except InfeasiblePolytope as exc:
            raise AssumptionViolated(
                "no calibrated martingale measure is supported by the ambiguity hull"
            ) from exc
        scale = 1.0 + float(np.abs(self.psi).max(initial=0.0))
        self.fw_opts = SolveOptions(
            tolerance=min(self.opts.tolerance, 1e-10) * scale,
            max_iterations=4000,
            seed=self.opts.seed,
        )
        self.a = self.util.param_dict["a"] if self.util.kind == "exponential" else None
        self.closed = (self.a is not None) and not force_generic
        if self.closed:
            self.ent = RobustDivergenceOracle(self.amb, relative_entropy_integrand(), self.opts)
        else:
            self.div = RobustDivergenceOracle(self.amb, utility_integrand(self.util), self.opts)
        self._c_star: Optional[Tuple[float, np.ndarray, np.ndarray, float, bool]] = None
        self._warm_q: Optional[np.ndarray] = None
        self._inner_cache: Dict[float, Tuple[float, np.ndarray, np.ndarray, float, bool]] = {}
        self._last_lambda: Optional[float] = None
        self.soft_limit_hit = False

    # -- exponential closed form -------------------------------------------------

    def _solve_c_star(self):
        """min over calibrated measures of (robust entropy - a * claim expectation)."""
        if self._c_star is None:
            a = self.a

            def value(q):
                v = self.ent.value(q)
                if not np.isfinite(v):
                    return math.inf
                return v - a * float(q @ self.psi)

            def gradient(q):
                return self.ent.gradient(q) - a * self.psi

            objective = SmoothObjective(
                value, gradient,
                line_factory=_frozen_line_factory(self.ent, 1.0, -a * self.psi),
            )
            fw = frank_wolfe_min(self.poly, objective, self.fw_opts, oracle=self.oracle_lp)
            value(fw.weights)  # refresh mixture weights at the reported point
            if not fw.converged:
                self.soft_limit_hit = True
            self._c_star = (fw.value, fw.weights, self.ent.w.copy(), fw.gap, fw.converged)
        return self._c_star

    # -- generic inner problem ----------------------------------------------------

    def inner(self, lam: float) -> Tuple[float, np.ndarray, np.ndarray, float, bool]:
        """D(lam) = min over calibrated q of divergence(lam q) - lam E_q[claim]."""
        if self.closed:
            c, q, w, gap, conv = self._solve_c_star()
            d = (lam / self.a) * c + (lam * math.log(lam) - lam) / self.a
            return d, q, w, gap, conv
        cached = self._inner_cache.get(lam)
        if cached is not None:
            return cached

        def value(q):
            v = self.div.value(lam * q)
            if not np.isfinite(v):
                return math.inf
            return v - lam * float(q @ self.psi)

        def gradient(q):
            return lam * self.div.gradient(lam * q) - lam * self.psi

        objective = SmoothObjective(
            value, gradient,
            line_factory=_frozen_line_factory(self.div, lam, -lam * self.psi),
        )
        fw = frank_wolfe_min(
            self.poly, objective, self.fw_opts, oracle=self.oracle_lp, start=self._warm_q,
        )
        value(fw.weights)
        if not fw.converged:
            self.soft_limit_hit = True
        self._warm_q = fw.weights
        out = (fw.value, fw.weights, self.div.w.copy(), fw.gap, fw.converged)
        self._inner_cache[lam] = out
        return out

    def d_value(self, lam: float) -> float:
        return self.inner(lam)[0]

    def _minimize_lambda(self, x: float) -> Tuple[float, float, float]:
        """Golden search of D(lam) + lam x; warm bracket around the last optimum.

        Returns (lam, value, bracket_hi); cached inner solves make repeated
        probes at the bracket-growth scales free.
        """

        def obj(lam):
            return self.d_value(lam) + lam * x

        center = self._last_lambda
        if len(self._inner_cache) >= 6:
            # centre the warm bracket at the argmin over the cached envelope
            keys = sorted(self._inner_cache)
            vals = [self._inner_cache[k][0] + k * x for k in keys]
            center = keys[int(np.argmin(vals))]

        if center is None:
            hi = 1.0
            val = obj(hi)
            while hi < _LAMBDA_CAP:
                nxt = obj(2.0 * hi)
                if nxt > val:
                    break
                hi *= 2.0
                val = nxt
            lo = _LAMBDA_FLOOR
            hi = 2.0 * hi
        else:
            # convexity: expand until the middle sits below both edges
            mid = max(center, 4.0 * _LAMBDA_FLOOR)
            lo, hi = mid / 3.0, mid * 3.0
            flo, fmid, fhi = obj(lo), obj(mid), obj(hi)
            for _ in range(80):
                if fmid <= flo and fmid <= fhi:
                    break
                if flo < fmid:
                    hi, fhi = mid, fmid
                    mid, fmid = lo, flo
                    lo = max(lo / 3.0, _LAMBDA_FLOOR)
                    flo = obj(lo)
                    if lo <= _LAMBDA_FLOOR and flo >= fmid:
                        break
                else:
                    lo, flo = mid, fmid
                    mid, fmid = hi, fhi
                    hi = min(hi * 3.0, _LAMBDA_CAP)
                    fhi = obj(hi)
                    if hi >= _LAMBDA_CAP and fhi >= fmid:
                        break
        lam, val = minimize_convex_1d(
            obj, (lo, hi),
            SolveOptions(tolerance=3e-7, max_iterations=200, seed=self.opts.seed),
        )
        self._last_lambda = lam
        return lam, val, hi

    def value(self, x: float) -> float:
        if self.closed:
            c, *_ = self._solve_c_star()
            return -math.exp(-self.a * x - c) / self.a
        _, val, _ = self._minimize_lambda(x)
        return val

    def solve(self, x: float) -> DualSolution:
        if self.closed:
            c, q, w, gap, conv = self._solve_c_star()
            lam = math.exp(-self.a * x - c)
            return DualSolution(
                lam=lam,
                q=PathMeasure(self.poly.lattice, q),
                weights=w,
                value=-lam / self.a,
                gap=gap,
                lambda_on_edge=False,
                converged=conv,
            )
        lam, val, hi = self._minimize_lambda(x)
        d, q, w, gap, conv = self.inner(lam)
        on_edge = lam <= 4.0 * _LAMBDA_FLOOR or lam >= 0.9 * hi
        return DualSolution(
            lam=lam,
            q=PathMeasure(self.poly.lattice, q),
            weights=w,
            value=d + lam * x,
            gap=gap,
            lambda_on_edge=on_edge,
            converged=conv,
        )


def dual_value(
    x: float,
    psi: Payoff,
    amb: AmbiguitySet,
    util: UtilitySpec,
    poly: MartingalePolytope,
    opts: Optional[SolveOptions] = None,
    *,
    use_closed_form: Optional[bool] = None,
) -> DualSolution:
    """Dual robust-utility value at initial cost x.

    Minimizes divergence(lam Q) - lam E_Q[claim] + lam x over scalings lam > 0
    and calibrated martingale measures Q: golden-section in lam outside a
    Frank-Wolfe minimization in Q, with the mixture-weight search nested in
    the divergence oracle. Exponential utility uses the closed-form scaling
    unless use_closed_form=False forces the generic route.
    """
    force_generic = use_closed_form is False
    machine = DualMachine(psi.values, amb, util, poly, opts, force_generic=force_generic)
    return machine.solve(x)


# ---------------------------------------------------------------------------
# Primal engine
# ---------------------------------------------------------------------------

@dataclass
class PrimalSolution:
    value: float
    dynamic: DynamicStrategy
    static: StaticPosition
    smoothed_value: float
    iterations: int


def _logsumexp(z: np.ndarray) -> float:
    zmax = float(z.max())
    return zmax + math.log(float(np.exp(z - zmax).sum()))


def call_basis(lattice: PathLattice) -> List[np.ndarray]:
    """Per-maturity basis [constant, calls struck at all grid points but the last].

    Spans exactly the grid functions, so restricting statics to this basis is
    a reparameterization, not a constraint.
    """
    out = []
    for g in lattice.grids:
        k = len(g)
        cols = [np.ones(k)]
        for j in range(k - 1):
            cols.append(np.maximum(g - g[j], 0.0))
        out.append(np.column_stack(cols))
    return out


def primal_value(
    x: float,
    psi: Payoff,
    amb: AmbiguitySet,
    util: UtilitySpec,
    poly: MartingalePolytope,
    lattice: Optional[PathLattice] = None,
    opts: Optional[SolveOptions] = None,
    sys: Optional[MarginalSystem] = None,
    *,
    static_basis: Optional[List[np.ndarray]] = None,
    theta0: Optional[np.ndarray] = None,
    beta_schedule: Sequence[float] = (10.0, 100.0, 1000.0),
    n_starts: int = 2,
    stage_iterations: int = 250,
) -> PrimalSolution:
    """Best worst-case expected utility over semistatic strategies.

    The min over hull generators is smoothed by a soft-min with an increasing
    sharpness schedule and maximized by backtracking gradient ascent from
    several starts; the reported value re-evaluates the unsmoothed worst case
    at the best point found, so it is always a valid lower bound.
    """
    opts = opts or SolveOptions()
    lattice = lattice or poly.lattice
    if sys is None:
        raise ValueError("primal_value needs the marginal system for static prices")
    rng = np.random.default_rng(opts.seed)
    d_dyn = dynamic_increment_matrix(lattice, list(poly.nodes))
    d_stat, slices = static_design(lattice, sys)
    if static_basis is not None:
        blocks = []
        for (s, e), basis in zip(slices, static_basis):
            blocks.append(d_stat[:, s:e] @ basis)
        d_stat_eff = np.hstack(blocks)
        basis_dims = [b.shape[1] for b in static_basis]
    else:
        d_stat_eff = d_stat
        basis_dims = [e - s for (s, e) in slices]
    design = np.hstack([d_dyn, d_stat_eff])
    dim = design.shape[1]
    pmat = amb.matrix
    psi_v = psi.values

    def worst_case(theta):
        wealth = x + design @ theta - psi_v
        return float((pmat @ util.u(wealth)).min())

    def smooth_value_grad_hess(theta, beta, *, want_hess=True):
        wealth = x + design @ theta - psi_v
        uvals = util.u(wealth)
        v = pmat @ uvals
        z = -beta * v
        zmax = z.max()
        ez = np.exp(z - zmax)
        val = -(zmax + math.log(ez.sum())) / beta
        omega = ez / ez.sum()
        up = util.u_prime(wealth)
        grads = pmat * up[None, :] @ design          # per-generator gradients
        grad = omega @ grads
        if not want_hess:
            return val, grad, None
        upp = util.u_double_prime(wealth)
        mix = (omega @ pmat) * upp
        hess = design.T @ (design * mix[:, None])    # sum_k omega_k Hess v_k
        centered = grads - grad[None, :]
        hess -= beta * centered.T @ (centered * omega[:, None])
        return val, grad, hess

    def ascend(theta, beta, iterations):
        # damped Newton on the smoothed concave objective; the landscape is
        # badly conditioned for steep utilities, so gradient steps stall
        val, grad, hess = smooth_value_grad_hess(theta, beta)
        steps = 0
        for _ in range(iterations):
            steps += 1
            gnorm = float(np.abs(grad).max(initial=0.0))
            if gnorm < 1e-12 * (1.0 + abs(val)):
                break
            reg = 1e-10 * (1.0 + float(np.abs(hess).max(initial=0.0)))
            try:
                direction = np.linalg.solve(-hess + reg * np.eye(dim), grad)
            except np.linalg.LinAlgError:
                direction = grad
            if float(direction @ grad) <= 0.0:
                direction = grad
            t = 1.0
            improved = False
            for _ in range(50):
                cand = theta + t * direction
                cval, cgrad, chess = smooth_value_grad_hess(cand, beta)
                if cval > val + 1e-15:
                    improved = True
                    break
                t *= 0.5
            if not improved:
                break
            theta, val, grad, hess = cand, cval, cgrad, chess
        return theta, steps

    best_theta = np.zeros(dim)
    best_value = worst_case(best_theta)
    total_iter = 0
    starts: List[np.ndarray] = []
    if theta0 is not None:
        starts.append(np.asarray(theta0, dtype=float))
    starts.append(np.zeros(dim))
    for _ in range(max(0, n_starts - 1)):
        starts.append(rng.normal(scale=0.1, size=dim))
    for theta_start in starts:
        theta = theta_start.copy()
        for beta in beta_schedule:
            theta, steps = ascend(theta, beta, stage_iterations)
            total_iter += steps
        cand_value = worst_case(theta)
        if cand_value > best_value:
            best_theta, best_value = theta, cand_value

    k_dyn = d_dyn.shape[1]
    h = DynamicStrategy(best_theta[:k_dyn], tuple(poly.nodes))
    coeffs = best_theta[k_dyn:]
    vectors = []
    pos = 0
    for i, (s, e) in enumerate(slices):
        kdim = basis_dims[i]
        part = coeffs[pos : pos + kdim]
        pos += kdim
        if static_basis is not None:
            vectors.append(static_basis[i] @ part)
        else:
            vectors.append(part)
    f = StaticPosition(tuple(vectors))
    sval, _, _ = smooth_value_grad_hess(best_theta, beta_schedule[-1], want_hess=False)
    return PrimalSolution(
        value=best_value, dynamic=h, static=f, smoothed_value=sval, iterations=total_iter
    )


# ---------------------------------------------------------------------------
# Indifference prices
# ---------------------------------------------------------------------------

@dataclass
class PriceRoute:
    value: float
    detail: str


@dataclass
class IndifferencePrices:
    p_sell: float
    p_buy: float
    sell_route_penalized: float
    sell_route_bisection: float
    buy_route_penalized: float
    buy_route_bisection: float
    u0: float
    cross_check_tolerance: float
    fallback_used: bool = False


def _root_in_x(machine: DualMachine, u0: float, lo: float, hi: float,
               tol_x: float) -> float:
    """Smallest x with machine.value(x) >= u0; Newton-accelerated bisection.

    machine.value is increasing and concave in x, so the affine majorant at
    the current dual solution gives a Newton step that approaches the root
    from below; a maintained bracket guards every step.
    """
    f_lo = machine.value(lo) - u0
    f_hi = machine.value(hi) - u0
    guard = 0
    while f_lo > 0 and guard < 60:
        lo -= max(1.0, hi - lo)
        f_lo = machine.value(lo) - u0
        guard += 1
    while f_hi < 0 and guard < 120:
        hi += max(1.0, hi - lo)
        f_hi = machine.value(hi) - u0
        guard += 1
    x = 0.5 * (lo + hi)
    for _ in range(200):
        if hi - lo <= tol_x:
            break
        sol = machine.solve(x)
        resid = sol.value - u0
        if resid < 0:
            lo = x
        else:
            hi = x
        lam = max(sol.lam, 1e-12)
        newton = x - resid / lam
        if lo < newton < hi:
            x = newton
        else:
            x = 0.5 * (lo + hi)
    return 0.5 * (lo + hi)


def _penalized_sup(machine: DualMachine, u0: float, opts: SolveOptions) -> float:
    """sup over calibrated measures of claim expectation minus the penalty.

    For exponential utility this is a direct Frank-Wolfe maximization with the
    closed-form penalty. Otherwise the supremum over measures is carried
    jointly with the scale search: sup over lam of (u0 - D(lam))/lam, each
    D(lam) being a Frank-Wolfe solve; the objective is unimodal in lam
    because it is concave in 1/lam.
    """
    if machine.closed:
        a = machine.a
        c0 = -math.log(-a * u0)  # entropy level of the no-claim optimum

        def value(q):
            ent = machine.ent.value(q)
            if not np.isfinite(ent):
                return math.inf
            gamma = (ent - c0) / a
            return gamma - float(q @ machine.psi)

        def gradient(q):
            return machine.ent.gradient(q) / a - machine.psi

        objective = SmoothObjective(
            value, gradient,
            line_factory=_frozen_line_factory(
                machine.ent, 1.0, -machine.psi, div_scale=1.0 / a, const=-c0 / a
            ),
        )
        fw = frank_wolfe_min(machine.poly, objective, machine.fw_opts, oracle=machine.oracle_lp)
        return -fw.value

    def neg_rho(lam):
        return -(u0 - machine.d_value(lam)) / lam

    hi = 1.0
    val = neg_rho(hi)
    while hi < _LAMBDA_CAP:
        nxt = neg_rho(2.0 * hi)
        if nxt > val:
            break
        hi *= 2.0
        val = nxt
    _, best = minimize_convex_1d(
        neg_rho, (_LAMBDA_FLOOR, 2.0 * hi),
        SolveOptions(tolerance=1e-9, max_iterations=200, seed=opts.seed),
    )
    return -best


def indifference_prices(
    psi: Payoff,
    amb: AmbiguitySet,
    util: UtilitySpec,
    poly: MartingalePolytope,
    x0: float = 0.0,
    opts: Optional[SolveOptions] = None,
    *,
    bounds: Optional[MotBounds] = None,
) -> IndifferencePrices:
    """Seller's and buyer's indifference prices with a two-route cross-check.

    Route one maximizes the penalized claim expectation over calibrated
    measures; route two locates the smallest initial cost whose claim-adjusted
    utility reaches the no-claim level by monotone bisection with Newton
    acceleration. The recorded prices come from route two; disagreement
    beyond 1e-4 * scale raises CrossCheckFailed.
    """
    opts = opts or SolveOptions()
    bounds = bounds or mot_bounds(poly, psi, opts)
    scale = 1.0 + abs(bounds.low) + abs(bounds.high)
    tol_x = 1e-10 * scale

    zero = np.zeros(poly.lattice.n_paths)
    machine0 = DualMachine(zero, amb, util, poly, opts)
    u0 = machine0.value(0.0)

    sell_machine = DualMachine(psi.values, amb, util, poly, opts)
    buy_machine = DualMachine(-psi.values, amb, util, poly, opts)

    sell_b = _root_in_x(sell_machine, u0, bounds.low - 1.0, bounds.high + 1.0, tol_x)
    buy_b = -_root_in_x(buy_machine, u0, -bounds.high - 1.0, -bounds.low + 1.0, tol_x)

    fallback = False
    try:
        sell_a_machine = DualMachine(psi.values, amb, util, poly, opts)
        buy_a_machine = DualMachine(-psi.values, amb, util, poly, opts)
        sell_a = _penalized_sup(sell_a_machine, u0, opts)
        buy_a = -_penalized_sup(buy_a_machine, u0, opts)
    except (AssumptionViolated, InfeasiblePolytope):
        fallback = True
        sell_a = sell_b
        buy_a = buy_b

    tol = 1e-4 * scale
    if not fallback:
        if abs(sell_a - sell_b) > tol or abs(buy_a - buy_b) > tol:
            raise CrossCheckFailed(
                f"indifference routes disagree: sell {sell_a!r} vs {sell_b!r}, "
                f"buy {buy_a!r} vs {buy_b!r}, tolerance {tol!r}"
            )
    return IndifferencePrices(
        p_sell=sell_b,
        p_buy=buy_b,
        sell_route_penalized=sell_a,
        sell_route_bisection=sell_b,
        buy_route_penalized=buy_a,
        buy_route_bisection=buy_b,
        u0=u0,
        cross_check_tolerance=tol,
        fallback_used=fallback,
    )


# ---------------------------------------------------------------------------
# Call-span restriction
# ---------------------------------------------------------------------------

@dataclass
class CallSpanDecomposition:
    constants: Tuple[float, ...]
    strikes: Tuple[np.ndarray, ...]
    coefficients: Tuple[np.ndarray, ...]
    reconstructed: StaticPosition


def call_span_restrict(f: StaticPosition, lattice: PathLattice) -> CallSpanDecomposition:
    """Exact re-expression of each static leg as constant + call portfolio.

    Grid functions are piecewise linear on their grids, so forward differences
    of the slopes give call coefficients at all grid points but the last; the
    reconstruction agrees with the input on the grid to rounding error.
    """
    constants = []
    strikes = []
    coefficients = []
    recon = []
    for g, y in zip(lattice.grids, f.vectors):
        y = np.asarray(y, dtype=float)
        if y.shape != g.shape:
            raise LatticeMismatch("static vector does not match its grid")
        c = float(y[0])
        if len(g) == 1:
            ks = np.empty(0)
            a = np.empty(0)
        else:
            slopes = np.diff(y) / np.diff(g)
            a = np.concatenate([[slopes[0]], np.diff(slopes)])
            ks = g[:-1].copy()
        rebuilt = c + (np.maximum(g[None, :] - ks[:, None], 0.0).T @ a
                       if a.size else np.zeros(len(g)))
        constants.append(c)
        strikes.append(ks)
        coefficients.append(a)
        recon.append(rebuilt)
    return CallSpanDecomposition(
        constants=tuple(constants),
        strikes=tuple(strikes),
        coefficients=tuple(coefficients),
        reconstructed=StaticPosition(tuple(recon)),
    )


def static_to_call_coordinates(f: StaticPosition, lattice: PathLattice) -> List[np.ndarray]:
    """Coefficients of each leg in the [constant, calls] basis of call_basis."""
    dec = call_span_restrict(f, lattice)
    return [np.concatenate([[c], a]) for c, a in zip(dec.constants, dec.coefficients)]


# ---------------------------------------------------------------------------
# Vertex enumeration and the trivial case
# ---------------------------------------------------------------------------

def _independent_rows(a: np.ndarray, tol: float = 1e-9) -> List[int]:
    rows: List[int] = []
    rank = 0
    for i in range(a.shape[0]):
        cand = rows + [i]
        if np.linalg.matrix_rank(a[cand], tol=tol) > rank:
            rows.append(i)
            rank += 1
    return rows


def enumerate_vertices(
    poly: MartingalePolytope,
    *,
    max_paths: int = 200,
    max_bases: int = 300_000,
) -> List[PathMeasure]:
    """All vertices of the martingale polytope by basis enumeration.

    Exhaustive over column subsets of the independent-row system, deduplicated
    by rounding; intended for harness-scale instances only.
    """
    n = poly.lattice.n_paths
    if n > max_paths:
        raise HarnessLimit(f"vertex enumeration capped at {max_paths} paths")
    rows = _independent_rows(poly.a_eq)
    a = poly.a_eq[rows]
    b = poly.b_eq[rows]
    r = len(rows)
    n_comb = math.comb(n, r)
    if n_comb > max_bases:
        raise HarnessLimit(f"too many candidate bases ({n_comb})")
    seen = {}
    for cols in combinations(range(n), r):
        sub = a[:, cols]
        try:
            x = np.linalg.solve(sub, b)
        except np.linalg.LinAlgError:
            continue
        if np.any(~np.isfinite(x)) or np.any(x < -1e-9):
            continue
        full = np.zeros(n)
        full[list(cols)] = np.maximum(x, 0.0)
        key = tuple(np.round(full, 9))
        if key not in seen:
            seen[key] = full
    return [PathMeasure(poly.lattice, w) for w in seen.values()]


@dataclass
class TrivialCaseReport:
    n_vertices: int
    mot_low: float
    mot_high: float
    p_sell: float
    p_buy: float
    sell_residual: float
    buy_residual: float
    ok: bool


def trivial_case_check(
    sys: MarginalSystem,
    psi_builder: Callable[[PathLattice], Payoff],
    opts: Optional[SolveOptions] = None,
    *,
    tolerance: float = 1e-4,
) -> TrivialCaseReport:
    """With the ambiguity hull set to the polytope's vertices, indifference
    prices must collapse to the model-free bounds (exponential utility)."""
    from .polytope import build_polytope

    opts = opts or SolveOptions()
    poly = build_polytope(sys)
    psi = psi_builder(poly.lattice)
    vertices = enumerate_vertices(poly)
    if not vertices:
        raise InfeasiblePolytope("no vertices: polytope is empty")
    amb = AmbiguitySet(vertices)
    util_exp = _exp_unit_utility()
    bounds = mot_bounds(poly, psi, opts)
    prices = indifference_prices(psi, amb, util_exp, poly, 0.0, opts, bounds=bounds)
    sell_res = abs(prices.p_sell - bounds.high)
    buy_res = abs(prices.p_buy - bounds.low)
    ok = sell_res <= tolerance and buy_res <= tolerance
    if not ok:
        raise CrossCheckFailed(
            f"trivial-case prices missed the bounds: sell residual {sell_res!r}, "
            f"buy residual {buy_res!r}"
        )
    return TrivialCaseReport(
        n_vertices=len(vertices),
        mot_low=bounds.low,
        mot_high=bounds.high,
        p_sell=prices.p_sell,
        p_buy=prices.p_buy,
        sell_residual=sell_res,
        buy_residual=buy_res,
        ok=ok,
    )


def _exp_unit_utility() -> UtilitySpec:
    from .divergence import exponential_utility

    return exponential_utility(1.0)


# ---------------------------------------------------------------------------
# Weak-duality sampling
# ---------------------------------------------------------------------------

def weak_duality_max_violation(
    sys: MarginalSystem,
    poly: MartingalePolytope,
    amb: AmbiguitySet,
    util: UtilitySpec,
    psi: Payoff,
    x: float,
    seed: int = 0,
    n_samples: int = 20,
) -> float:
    """Largest sampled violation of the primal-dual inequality.

    For random strategies (h, f), scalings lam > 0, calibrated measures Q and
    hull generators P it must hold that the worst-case expected utility of the
    hedged position never exceeds divergence(lam Q | P) - lam E_Q[claim] + lam x.
    Returns max(lhs - rhs); a correct implementation keeps this <= ~1e-9.
    """
    from .divergence import divergence_single, utility_integrand

    rng = np.random.default_rng(seed)
    lattice = poly.lattice
    d_dyn = dynamic_increment_matrix(lattice, list(poly.nodes))
    d_stat, _ = static_design(lattice, sys)
    verdict = feasibility(poly)
    if not verdict.feasible:
        raise InfeasiblePolytope("weak-duality sampling needs a feasible polytope")
    base_q = verdict.witness.weights
    # a few extra vertices from random linear objectives widen the Q sample
    oracle = PolytopeOracle(poly.a_eq, poly.b_eq)
    vertices = [base_q]
    for _ in range(3):
        v, _ = oracle.minimize(rng.normal(size=lattice.n_paths))
        vertices.append(v)
    spec = utility_integrand(util)
    worst = -math.inf
    for _ in range(n_samples):
        h = rng.normal(scale=1.0, size=d_dyn.shape[1])
        f = rng.normal(scale=1.0, size=d_stat.shape[1])
        lam = float(rng.uniform(0.05, 4.0))
        mix = rng.random(len(vertices))
        mix /= mix.sum()
        qw = sum(m * v for m, v in zip(mix, vertices))
        q = PathMeasure(lattice, qw)
        k = int(rng.integers(0, amb.m))
        p = amb.priors[k]
        wealth = x + d_dyn @ h + d_stat @ f - psi.values
        lhs = float(p.weights @ util.u(wealth))
        div = divergence_single(PathMeasure(lattice, lam * qw), p, spec)
        if not np.isfinite(div):
            continue
        rhs = div - lam * float(qw @ psi.values) + lam * x
        worst = max(worst, lhs - rhs)
    return worst


# ---------------------------------------------------------------------------
# Report assembly
# ---------------------------------------------------------------------------

@dataclass
class PricingReport:
    mot_low: float
    mot_high: float
    u_psi_at_x: float
    dual: DualSolution
    primal: PrimalSolution
    duality_gap: float
    relative_gap: float
    p_sell: float
    p_buy: float
    prices: IndifferencePrices
    scale: float
    diagnostics: Dict


def price_report(
    sys: MarginalSystem,
    amb: AmbiguitySet,
    util: UtilitySpec,
    psi: Payoff,
    x: float,
    poly: MartingalePolytope,
    opts: Optional[SolveOptions] = None,
) -> PricingReport:
    """End-to-end valuation: bounds, dual, primal, gap and indifference prices."""
    opts = opts or SolveOptions()
    bounds = mot_bounds(poly, psi, opts)
    scale = 1.0 + abs(bounds.low) + abs(bounds.high)
    dual = dual_value(x, psi, amb, util, poly, opts)
    primal = primal_value(x, psi, amb, util, poly, poly.lattice, opts, sys=sys)
    gap = dual.value - primal.value
    prices = indifference_prices(psi, amb, util, poly, 0.0, opts, bounds=bounds)
    diagnostics = {
        "n_paths": poly.lattice.n_paths,
        "n_rows": poly.n_rows,
        "utility": util.kind,
        "payoff": psi.name,
        "payoff_growth_ratio": psi.growth_ratio,
        "dual_lambda_on_edge": dual.lambda_on_edge,
        "dual_gap_certificate": dual.gap,
        "dual_converged": dual.converged,
        "primal_iterations": primal.iterations,
        "indifference_fallback": prices.fallback_used,
        "seed": opts.seed,
    }
    return PricingReport(
        mot_low=bounds.low,
        mot_high=bounds.high,
        u_psi_at_x=dual.value,
        dual=dual,
        primal=primal,
        duality_gap=gap,
        relative_gap=gap / scale,
        p_sell=prices.p_sell,
        p_buy=prices.p_buy,
        prices=prices,
        scale=scale,
        diagnostics=diagnostics,
    )
