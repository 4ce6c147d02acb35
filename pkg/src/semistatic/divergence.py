"""Utility conjugate pairs, robust integral functionals, divergences and the
finite-lattice conjugacy harness.

Conventions used throughout: densities are taken path by path, paths with
zero reference mass and zero measure mass contribute nothing, and any mass
outside the reference support (or a negative density when the conjugate
domain is the nonnegative half-line) makes a divergence +inf.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DivergenceInfinite, HarnessLimit, LatticeMismatch
from .optimize import (
    SimplexResult,
    SolveOptions,
    minimize_convex_1d,
    minimize_over_simplex,
)
from .polytope import PathMeasure

_RATIO_FLOOR = 1e-300  # keeps log-gradients finite at empty coordinates


def _xlogx(y: np.ndarray) -> np.ndarray:
    """y*log(y) with the 0*log(0)=0 convention; +inf preserved for y<0 callers."""
    out = np.zeros_like(y)
    pos = y > 0
    out[pos] = y[pos] * np.log(y[pos])
    return out


# ---------------------------------------------------------------------------
# Utility specifications
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UtilitySpec:
    """Strictly concave utility with its convex conjugate V(y)=sup_x(U(x)-xy).

    All evaluators are vectorized over numpy arrays. Both built-in kinds have
    dom V = [0, inf) with V(0) = 0, and satisfy the marginal-utility limits
    U'(-inf) = +inf, U'(+inf) = 0.
    """

    kind: str
    params: Tuple[Tuple[str, float], ...]
    u: Callable[[np.ndarray], np.ndarray]
    u_prime: Callable[[np.ndarray], np.ndarray]
    v: Callable[[np.ndarray], np.ndarray]
    v_prime: Callable[[np.ndarray], np.ndarray]
    u_double_prime: Optional[Callable[[np.ndarray], np.ndarray]] = None

    @property
    def param_dict(self) -> dict:
        return dict(self.params)


def exponential_utility(a: float = 1.0) -> UtilitySpec:
    """U(x) = -exp(-a x)/a with conjugate V(y) = (y log y - y)/a on y >= 0."""
    if a <= 0:
        raise ValueError("risk aversion must be positive")

    def u(x):
        return -np.exp(-a * np.asarray(x, dtype=float)) / a

    def u_prime(x):
        return np.exp(-a * np.asarray(x, dtype=float))

    def v(y):
        y = np.asarray(y, dtype=float)
        out = np.where(y < 0, np.inf, (_xlogx(np.maximum(y, 0.0)) - np.maximum(y, 0.0)) / a)
        return out

    def v_prime(y):
        y = np.asarray(y, dtype=float)
        with np.errstate(divide="ignore"):
            return np.log(y) / a

    return UtilitySpec(
        kind="exponential", params=(("a", float(a)),),
        u=u, u_prime=u_prime, v=v, v_prime=v_prime,
        u_double_prime=lambda x: -a * np.exp(-a * np.asarray(x, dtype=float)),
    )


def _solve_eq_density(x: np.ndarray, kappa: float) -> np.ndarray:
    """Solve log y + 2*kappa*y + x = 0 for y > 0, elementwise (safeguarded Newton)."""
    x = np.asarray(x, dtype=float)
    # initial guess: exact for whichever term dominates
    y = np.where(x < 0, np.maximum(-x / (2.0 * kappa), 1.0), np.exp(-np.minimum(x, 700.0)))
    y = np.maximum(y, 1e-300)
    for _ in range(80):
        g = np.log(y) + 2.0 * kappa * y + x
        gp = 1.0 / y + 2.0 * kappa
        step = g / gp
        y_new = y - step
        # fall back to damping whenever Newton overshoots the domain
        bad = y_new <= 0
        if np.any(bad):
            y_new = np.where(bad, y * np.exp(-np.clip(g / (gp * y), -50, 50)), y_new)
        y_new = np.maximum(y_new, 1e-300)
        if np.all(np.abs(y_new - y) <= 1e-15 * (1.0 + np.abs(y))):
            y = y_new
            break
        y = y_new
    return y


def entropic_quadratic_utility(kappa: float) -> UtilitySpec:
    """Utility defined through V(y) = y log y - y + kappa y^2 on y >= 0.

    U(x) = inf_{y>0} (V(y) + x y) is evaluated by solving the stationarity
    condition log y + 2 kappa y + x = 0 with Newton iterations; U'(x) equals
    the minimizing y. This is the non-exponential test pair: it satisfies the
    same marginal-utility limits but has no closed-form U.
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")

    def v(y):
        y = np.asarray(y, dtype=float)
        yp = np.maximum(y, 0.0)
        return np.where(y < 0, np.inf, _xlogx(yp) - yp + kappa * yp * yp)

    def v_prime(y):
        y = np.asarray(y, dtype=float)
        with np.errstate(divide="ignore"):
            return np.log(y) + 2.0 * kappa * y

    def u(x):
        ystar = _solve_eq_density(x, kappa)
        return v(ystar) + np.asarray(x, dtype=float) * ystar

    def u_prime(x):
        return _solve_eq_density(x, kappa)

    def u_double_prime(x):
        # implicit differentiation of the stationarity condition
        y = _solve_eq_density(x, kappa)
        return -y / (1.0 + 2.0 * kappa * y)

    return UtilitySpec(
        kind="entropic_quadratic", params=(("kappa", float(kappa)),),
        u=u, u_prime=u_prime, v=v, v_prime=v_prime,
        u_double_prime=u_double_prime,
    )


def utility_from_config(kind: str, params: dict) -> UtilitySpec:
    if kind == "exponential":
        return exponential_utility(float(params.get("a", 1.0)))
    if kind == "entropic_quadratic":
        return entropic_quadratic_utility(float(params["kappa"]))
    raise ValueError(f"unknown utility kind {kind!r}")


# ---------------------------------------------------------------------------
# Ambiguity sets and integrands
# ---------------------------------------------------------------------------

@dataclass
class AmbiguitySet:
    """Finitely generated convex hull of prior path measures."""

    priors: List[PathMeasure]

    def __post_init__(self):
        if len(self.priors) < 1:
            raise ValueError("need at least one prior")
        lattice = self.priors[0].lattice
        for p in self.priors:
            if p.lattice is not lattice and p.lattice.n_paths != lattice.n_paths:
                raise LatticeMismatch("priors must share one lattice")
            if not p.is_probability:
                raise ValueError("priors must be probability measures")
        self.lattice = lattice

    @property
    def m(self) -> int:
        return len(self.priors)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([p.weights for p in self.priors])

    def support(self) -> np.ndarray:
        return self.matrix.max(axis=0) > 0


@dataclass(frozen=True)
class IntegrandSpec:
    """Deterministic convex base function plus an optional per-path shift.

    The shifted integrand acts as x -> phi(x + shift) with conjugate
    phi*(y) - y * shift, evaluated path by path. conjugate_nonneg marks
    integrands whose conjugate is +inf on negative arguments.
    """

    name: str
    phi: Callable[[np.ndarray], np.ndarray]
    phi_prime: Callable[[np.ndarray], np.ndarray]
    phi_star: Callable[[np.ndarray], np.ndarray]
    phi_star_prime: Callable[[np.ndarray], np.ndarray]
    conjugate_nonneg: bool
    shift: Optional[np.ndarray] = None
    # inverse of phi_prime where available; used to seed dual maximizations
    phi_prime_inv: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def with_shift(self, shift: Optional[np.ndarray]) -> "IntegrandSpec":
        s = None if shift is None else np.asarray(shift, dtype=float)
        return replace(self, shift=s)

    def eval_shifted(self, f: np.ndarray) -> np.ndarray:
        arg = f if self.shift is None else f + self.shift
        return self.phi(arg)

    def eval_shifted_prime(self, f: np.ndarray) -> np.ndarray:
        arg = f if self.shift is None else f + self.shift
        return self.phi_prime(arg)


def quadratic_integrand() -> IntegrandSpec:
    """phi(x) = x^2/2 with conjugate y^2/2 (full-line domain)."""
    return IntegrandSpec(
        name="quadratic",
        phi=lambda x: 0.5 * np.asarray(x, dtype=float) ** 2,
        phi_prime=lambda x: np.asarray(x, dtype=float),
        phi_star=lambda y: 0.5 * np.asarray(y, dtype=float) ** 2,
        phi_star_prime=lambda y: np.asarray(y, dtype=float),
        conjugate_nonneg=False,
        phi_prime_inv=lambda y: np.asarray(y, dtype=float),
    )


def exponential_integrand(a: float = 1.0) -> IntegrandSpec:
    """phi(x) = exp(a x)/a with conjugate (y log y - y)/a on y >= 0.

    For a = 1 this is the classical exp / y log y - y pair; it is exactly the
    conjugate pair carried by the exponential utility.
    """
    if a <= 0:
        raise ValueError("a must be positive")

    def phi(x):
        return np.exp(a * np.asarray(x, dtype=float)) / a

    def phi_star(y):
        y = np.asarray(y, dtype=float)
        yp = np.maximum(y, 0.0)
        return np.where(y < 0, np.inf, (_xlogx(yp) - yp) / a)

    def phi_star_prime(y):
        with np.errstate(divide="ignore"):
            return np.log(np.asarray(y, dtype=float)) / a

    def phi_prime_inv(y):
        return np.log(np.maximum(np.asarray(y, dtype=float), 1e-300)) / a

    return IntegrandSpec(
        name="exponential",
        phi=phi,
        phi_prime=lambda x: np.exp(a * np.asarray(x, dtype=float)),
        phi_star=phi_star,
        phi_star_prime=phi_star_prime,
        conjugate_nonneg=True,
        phi_prime_inv=phi_prime_inv,
    )


def relative_entropy_integrand() -> IntegrandSpec:
    """Conjugate pair whose divergence is the relative entropy sum q log(q/p)."""

    def phi_star(y):
        y = np.asarray(y, dtype=float)
        return np.where(y < 0, np.inf, _xlogx(np.maximum(y, 0.0)))

    def phi_star_prime(y):
        with np.errstate(divide="ignore"):
            return np.log(np.asarray(y, dtype=float)) + 1.0

    return IntegrandSpec(
        name="relative_entropy",
        phi=lambda x: np.exp(np.asarray(x, dtype=float) - 1.0),
        phi_prime=lambda x: np.exp(np.asarray(x, dtype=float) - 1.0),
        phi_star=phi_star,
        phi_star_prime=phi_star_prime,
        conjugate_nonneg=True,
    )


def utility_integrand(util: UtilitySpec) -> IntegrandSpec:
    """The convex integrand x -> -U(-x) whose conjugate is the utility's V."""
    if util.kind == "exponential":
        return exponential_integrand(util.param_dict["a"])

    def phi(x):
        return -util.u(-np.asarray(x, dtype=float))

    def phi_prime(x):
        return util.u_prime(-np.asarray(x, dtype=float))

    return IntegrandSpec(
        name=f"conjugate_of_{util.kind}",
        phi=phi,
        phi_prime=phi_prime,
        phi_star=util.v,
        phi_star_prime=util.v_prime,
        conjugate_nonneg=True,
    )


# ---------------------------------------------------------------------------
# Robust integral functional and divergences
# ---------------------------------------------------------------------------

def robust_integral(f: np.ndarray, spec: IntegrandSpec, amb: AmbiguitySet) -> float:
    """sup over the ambiguity hull of E_P[phi(f + shift)].

    Expectations are affine in P, so the supremum over the hull is attained
    at a generator and the value is an exact finite max.
    """
    f = np.asarray(f, dtype=float)
    vals = spec.eval_shifted(f)
    return float((amb.matrix @ vals).max())


def _conjugate_sum(
    nu: np.ndarray, p: np.ndarray, spec: IntegrandSpec
) -> float:
    """sum_j p_j phi*(nu_j / p_j) with the boundary conventions, +inf allowed."""
    if spec.conjugate_nonneg and nu.min(initial=0.0) < 0:
        return math.inf
    pos = p > 0
    if not pos.all() and np.any(nu[~pos] != 0):
        return math.inf
    pp = p[pos]
    vals = spec.phi_star(nu[pos] / pp)
    total = float(pp @ vals)
    if not np.isfinite(total):
        return math.inf
    if spec.shift is not None:
        total -= float(nu @ spec.shift)
    return total


def divergence_single(nu: PathMeasure, p: PathMeasure, spec: IntegrandSpec) -> float:
    """Divergence of nu against a single reference measure p.

    +inf when nu is not absolutely continuous w.r.t. p or the density leaves
    the conjugate domain; paths with p = nu = 0 contribute 0.
    """
    if nu.lattice.n_paths != p.lattice.n_paths:
        raise LatticeMismatch("measures must share one lattice")
    return _conjugate_sum(nu.weights, p.weights, spec)


class RobustDivergenceOracle:
    """Value and gradient of nu -> inf over hull mixtures of the divergence.

    Keeps the last optimal mixture weights as a warm start, which makes the
    repeated evaluations inside Frank-Wolfe loops and scalar searches cheap.
    """

    def __init__(
        self,
        amb: AmbiguitySet,
        spec: IntegrandSpec,
        opts: Optional[SolveOptions] = None,
    ):
        self.amb = amb
        self.spec = spec
        self.pmat = amb.matrix
        self.support = amb.support()
        self.opts = opts or SolveOptions()
        self.inner_opts = SolveOptions(
            tolerance=max(self.opts.tolerance * 1e-2, 1e-13),
            max_iterations=4000,
            seed=self.opts.seed,
        )
        self.w = np.full(amb.m, 1.0 / amb.m)

    def _covered(self, nu: np.ndarray) -> bool:
        return not np.any((nu != 0) & ~self.support)

    def _solve_weights(self, nu: np.ndarray) -> SimplexResult:
        if self.amb.m == 1:
            w = np.ones(1)
            return SimplexResult(w, self._value_at(nu, w), 0.0, 0, True)

        def g(w):
            return self._value_at(nu, w)

        def grad(w):
            p = w @ self.pmat
            pos = p > 0
            ratio = np.zeros_like(p)
            ratio[pos] = nu[pos] / p[pos]
            # d/dp of p*phi*(nu/p) = phi*(r) - r phi*'(r), with r->0 limit phi*(0)
            core = self.spec.phi_star(ratio)
            rp = np.zeros_like(p)
            rpos = ratio > 0
            rp[rpos] = ratio[rpos] * self.spec.phi_star_prime(ratio[rpos])
            neg = ratio < 0
            if np.any(neg):  # only reachable for full-domain conjugates
                rp[neg] = ratio[neg] * self.spec.phi_star_prime(ratio[neg])
            term = core - rp
            return self.pmat[:, pos] @ term[pos]

        res = minimize_over_simplex(g, self.amb.m, self.inner_opts, grad=grad, w0=self.w)
        self.w = res.weights
        return res

    def _value_at(self, nu: np.ndarray, w: np.ndarray) -> float:
        return _conjugate_sum(nu, w @ self.pmat, self.spec)

    def value(self, nu: np.ndarray) -> float:
        if self.spec.conjugate_nonneg and np.any(nu < 0):
            return math.inf
        if not self._covered(nu):
            return math.inf
        return self._solve_weights(nu).value

    def value_weights(self, nu: np.ndarray) -> Tuple[float, np.ndarray]:
        if (self.spec.conjugate_nonneg and np.any(nu < 0)) or not self._covered(nu):
            return math.inf, self.w.copy()
        res = self._solve_weights(nu)
        return res.value, res.weights

    def gradient(self, nu: np.ndarray) -> np.ndarray:
        """Gradient at the optimal mixture; log-type singularities are floored."""
        self._solve_weights(nu)
        p = self.w @ self.pmat
        pos = p > 0
        ratio = np.full_like(p, _RATIO_FLOOR)
        ratio[pos] = np.maximum(nu[pos] / p[pos], _RATIO_FLOOR)
        grad = self.spec.phi_star_prime(ratio)
        grad[~pos] = 0.0
        if self.spec.shift is not None:
            grad = grad - self.spec.shift
        return grad


def divergence_robust(
    nu: PathMeasure,
    amb: AmbiguitySet,
    spec: IntegrandSpec,
    opts: Optional[SolveOptions] = None,
    *,
    w0: Optional[np.ndarray] = None,
) -> Tuple[float, np.ndarray]:
    """Infimum of the divergence over hull mixtures, with minimizing weights.

    +inf exactly when nu is not absolutely continuous w.r.t. the uniform
    mixture of the generators (no strictly positive mixture dominates nu).
    """
    if nu.lattice.n_paths != amb.lattice.n_paths:
        raise LatticeMismatch("measure and ambiguity set must share one lattice")
    oracle = RobustDivergenceOracle(amb, spec, opts)
    if w0 is not None:
        oracle.w = np.asarray(w0, dtype=float)
    return oracle.value_weights(nu.weights)


# ---------------------------------------------------------------------------
# Penalty on pricing measures
# ---------------------------------------------------------------------------

@dataclass
class GammaResult:
    value: float
    lam: float
    weights: np.ndarray


def _grow_bracket(h: Callable[[float], float], *, lo: float = 1e-8, start: float = 1.0,
                  cap: float = 2.0**40) -> Tuple[float, float]:
    """Geometric growth of the right endpoint until a convex h turns upward."""
    hi = start
    val = h(hi)
    while hi < cap:
        nxt = h(2.0 * hi)
        if nxt > val:
            break
        hi *= 2.0
        val = nxt
    return lo, 2.0 * hi


def gamma_penalty(
    q: PathMeasure,
    amb: AmbiguitySet,
    util: UtilitySpec,
    u0_at_0: float,
    opts: Optional[SolveOptions] = None,
) -> GammaResult:
    """Penalty inf over scaling of (divergence of scaled q minus the no-claim
    value) / scale, computed by a golden-section search in the scale.

    Raises DivergenceInfinite when q charges paths outside the hull support.
    Values within -1e-9 of zero are clamped to 0.
    """
    opts = opts or SolveOptions()
    if not q.is_probability:
        raise ValueError("penalty is defined for probability measures")
    oracle = RobustDivergenceOracle(amb, utility_integrand(util), opts)
    if not oracle._covered(q.weights):
        raise DivergenceInfinite("measure charges paths outside the hull support")

    def h(lam: float) -> float:
        return (oracle.value(lam * q.weights) - u0_at_0) / lam

    lo, hi = _grow_bracket(h)
    scalar_opts = SolveOptions(tolerance=1e-12, max_iterations=200, seed=opts.seed)
    lam, val = minimize_convex_1d(h, (lo, hi), scalar_opts)
    _, w = oracle.value_weights(lam * q.weights)
    if -1e-9 <= val < 0.0:
        val = 0.0
    return GammaResult(value=float(val), lam=float(lam), weights=w)


# ---------------------------------------------------------------------------
# Conjugacy harness
# ---------------------------------------------------------------------------

_HARNESS_MAX_PATHS = 64


def _ascent(value_grad, x0, *, iterations=400, step0=1.0):
    """Backtracking gradient ascent for concave objectives; returns best point/value."""
    x = np.asarray(x0, dtype=float).copy()
    val, grad = value_grad(x)
    best_x, best_val = x.copy(), val
    step = step0
    for _ in range(iterations):
        gnorm = float(np.abs(grad).max(initial=0.0))
        if gnorm < 1e-13:
            break
        improved = False
        for _ in range(40):
            x_new = x + step * grad
            val_new, grad_new = value_grad(x_new)
            if val_new > val + 1e-14:
                improved = True
                break
            step *= 0.5
        if not improved:
            break
        x, val, grad = x_new, val_new, grad_new
        step *= 1.5
        if val > best_val:
            best_x, best_val = x.copy(), val
    return best_x, best_val


@dataclass
class ConjugacyReport:
    """Residuals of the three finite-lattice conjugacy identities."""

    max_residual_conjugate: float   # sup_f (nu.f - I(f))  vs  robust divergence
    max_residual_attainment: float  # I(f)  vs  max_nu (nu.f - J(nu))
    max_residual_cone: float        # inf_cone I  vs  -min over the polar of J(-nu)
    shift_identity_residual: float  # shifted divergence vs divergence - nu(shift)
    negative_mass_rejected: bool
    trials: int

    @property
    def max_residual(self) -> float:
        return max(
            self.max_residual_conjugate,
            self.max_residual_attainment,
            self.max_residual_cone,
            self.shift_identity_residual,
        )


def _numeric_conjugate(nu_w, spec, amb, rng, *, starts=8, iterations=400):
    """sup over functions f of nu.f - robust integral, by multi-start ascent.

    The max over hull generators is smoothed by a soft-max with an increasing
    sharpness schedule (plain ascent zigzags at interior-mixture optima);
    the reported value always re-evaluates the exact objective. Stationarity
    candidates against each generator and against the minimizing mixture seed
    the ascent when the base derivative is invertible.
    """
    pmat = amb.matrix
    n = pmat.shape[1]

    def true_value(f):
        vals = spec.eval_shifted(f)
        return float(nu_w @ f) - float((pmat @ vals).max())

    def smooth_value_grad(f, beta):
        vals = spec.eval_shifted(f)
        means = pmat @ vals
        top = means.max()
        ez = np.exp(beta * (means - top))
        val = float(nu_w @ f) - float(top + math.log(ez.sum()) / beta)
        omega = ez / ez.sum()
        grad = nu_w - (omega @ pmat) * spec.eval_shifted_prime(f)
        return val, grad

    def seed_from(p_ref):
        ratio = np.where(p_ref > 0, nu_w / np.maximum(p_ref, 1e-300), 0.0)
        f0 = spec.phi_prime_inv(ratio)
        if spec.shift is not None:
            f0 = f0 - spec.shift
        return np.clip(f0, -1e3, 1e3)

    seeds = []
    if spec.phi_prime_inv is not None:
        for k in range(pmat.shape[0]):
            seeds.append(seed_from(pmat[k]))
        if pmat.shape[0] > 1:
            # stationarity against the divergence-minimizing mixture
            probe = RobustDivergenceOracle(amb, spec)
            val_j, w_star = probe.value_weights(nu_w)
            if np.isfinite(val_j):
                seeds.append(seed_from(w_star @ pmat))
    best = -math.inf
    for s in range(starts):
        if s < len(seeds):
            f0 = seeds[s]
        elif s == len(seeds):
            f0 = np.zeros(n)
        else:
            f0 = rng.normal(scale=1.0 + s * 0.5, size=n)
        best = max(best, true_value(f0))
        f = f0
        for beta in (10.0, 100.0, 1e3, 1e4, 1e5):
            f, _ = _ascent(lambda x: smooth_value_grad(x, beta), f,
                           iterations=iterations // 4)
            best = max(best, true_value(f))
    return best


def _numeric_cone_infimum(gens, spec, amb, rng, *, starts=6, iterations=500):
    """inf over nonnegative combinations of the spanning functions of the
    robust integral, by projected multi-start descent plus a coordinate polish."""
    pmat = amb.matrix
    k = gens.shape[0]

    def value_grad(a):
        f = a @ gens
        vals = spec.eval_shifted(f)
        means = pmat @ vals
        j = int(np.argmax(means))
        val = float(means[j])
        grad = gens @ (pmat[j] * spec.eval_shifted_prime(f))
        return val, grad

    best_a, best = np.zeros(k), value_grad(np.zeros(k))[0]
    for s in range(starts):
        a = np.zeros(k) if s == 0 else np.abs(rng.normal(scale=1.0, size=k))
        val, grad = value_grad(a)
        step = 0.5
        for _ in range(iterations):
            a_new = np.maximum(a - step * grad, 0.0)
            val_new, grad_new = value_grad(a_new)
            if val_new < val - 1e-15:
                a, val, grad = a_new, val_new, grad_new
                step *= 1.3
            else:
                step *= 0.5
                if step < 1e-12:
                    break
        if val < best:
            best_a, best = a, val
    # coordinate golden polish around the incumbent
    a = best_a.copy()
    for _ in range(3):
        for i in range(k):
            def fi(t, i=i):
                b = a.copy()
                b[i] = t
                return value_grad(b)[0]
            hi = max(2.0 * a[i] + 1.0, 1.0)
            t, val = minimize_convex_1d(fi, (0.0, hi), SolveOptions(tolerance=1e-10))
            if val < best:
                a[i] = t
                best = val
    return best


def _polar_min_fixed_prior(gens, spec, p):
    """Exact constrained divergence minimum against one reference measure.

    Enumerates KKT active sets: stationarity gives m = p * phi'(B + G' mu)
    on the support, and the multipliers of an active subset solve a tiny
    nonlinear system (damped Newton with finite-difference Jacobians).
    Returns (best value, best m); inf when no candidate is feasible.
    """
    k, n = gens.shape
    shift = spec.shift if spec.shift is not None else np.zeros(n)
    pos = p > 0

    def m_of(mu):
        z = shift + gens.T @ mu
        m = np.zeros(n)
        m[pos] = p[pos] * spec.phi_prime(np.clip(z[pos], -700.0, 700.0))
        return m

    best_val, best_m = math.inf, None
    from itertools import combinations as _comb

    for size in range(k + 1):
        for subset in _comb(range(k), size):
            mu = np.zeros(k)
            ok = True
            if size:
                idx = list(subset)

                def h(mu_s):
                    full = np.zeros(k)
                    full[idx] = mu_s
                    return gens[idx] @ m_of(full)

                mu_s = np.zeros(size)
                val = h(mu_s)
                for _ in range(80):
                    if float(np.abs(val).max()) < 1e-12:
                        break
                    jac = np.zeros((size, size))
                    eps = 1e-7
                    for i in range(size):
                        probe = mu_s.copy()
                        probe[i] += eps
                        jac[:, i] = (h(probe) - val) / eps
                    try:
                        step = np.linalg.solve(jac, -val)
                    except np.linalg.LinAlgError:
                        ok = False
                        break
                    t = 1.0
                    norm0 = float(np.abs(val).max())
                    for _ in range(30):
                        cand = mu_s + t * step
                        cval = h(cand)
                        if float(np.abs(cval).max()) < norm0:
                            mu_s, val = cand, cval
                            break
                        t *= 0.5
                    else:
                        ok = False
                        break
                if not ok or float(np.abs(val).max()) > 1e-8:
                    continue
                mu[idx] = mu_s
                if np.any(mu_s < -1e-9):
                    continue
            m = m_of(mu)
            if float(np.min(gens @ m, initial=0.0)) < -1e-8:
                continue
            value = _conjugate_sum(m, p, spec)
            if value < best_val:
                best_val, best_m = value, m
    return best_val, best_m


def _numeric_polar_minimum(gens, spec, amb, rng, *, starts=4, iterations=400):
    """min of the robust divergence over measures m with m(g_i) >= 0 for every
    spanning function.

    Primary route: exact KKT active-set solve per reference measure, with the
    hull mixture handled by the simplex-weight minimizer. Safety net: an
    augmented-Lagrangian loop around projected descent; the smaller feasible
    value wins.
    """
    oracle = RobustDivergenceOracle(amb, spec)
    n = gens.shape[1]
    nonneg = spec.conjugate_nonneg

    # exact route
    pmat = amb.matrix
    if amb.m == 1:
        exact_val, _ = _polar_min_fixed_prior(gens, spec, pmat[0])
    else:
        state = {}

        def g_w(w):
            val, m = _polar_min_fixed_prior(gens, spec, w @ pmat)
            state["m"] = m
            return val

        def grad_w(w):
            p = w @ pmat
            m = state.get("m")
            if m is None:
                g_w(w)
                m = state["m"]
            posp = p > 0
            ratio = np.zeros_like(p)
            ratio[posp] = m[posp] / p[posp]
            core = spec.phi_star(ratio)
            rp = np.where(ratio != 0.0, ratio * spec.phi_star_prime(np.where(ratio > 0, ratio, 1.0)), 0.0)
            neg = ratio < 0
            if np.any(neg):
                rp[neg] = ratio[neg] * spec.phi_star_prime(ratio[neg])
            term = core - rp
            return pmat[:, posp] @ term[posp]

        res = minimize_over_simplex(
            g_w, amb.m, SolveOptions(tolerance=1e-11, max_iterations=3000), grad=grad_w
        )
        exact_val = res.value

    def descend(m, mu, rho):
        def value_grad(m):
            v = oracle.value(m)
            if not np.isfinite(v):
                return math.inf, None
            slack = gens @ m - mu / rho
            active = np.minimum(slack, 0.0)
            val = v + 0.5 * rho * float(active @ active)
            grad = oracle.gradient(m) + rho * (gens.T @ active)
            return val, grad

        val, grad = value_grad(m)
        step = 0.1
        for _ in range(iterations):
            if grad is None or float(np.abs(grad).max(initial=0.0)) < 1e-12:
                break
            improved = False
            for _ in range(40):
                m_new = m - step * grad
                if nonneg:
                    m_new = np.maximum(m_new, 0.0)
                m_new = np.where(oracle.support, m_new, 0.0)
                val_new, grad_new = value_grad(m_new)
                if val_new < val - 1e-15:
                    improved = True
                    break
                step *= 0.5
            if not improved:
                break
            m, val, grad = m_new, val_new, grad_new
            step *= 1.4
        return m

    best = exact_val
    if np.isfinite(exact_val):
        starts = 1  # descent is only a cross-net once the KKT route succeeded
    uniform_mix = amb.matrix.mean(axis=0)
    for s in range(starts):
        if s == 0:
            m0 = uniform_mix.copy()
        elif s == 1:
            m0 = np.zeros(n)
        else:
            m0 = np.abs(rng.normal(scale=0.5, size=n)) * uniform_mix * 2.0
        m = m0
        mu = np.zeros(gens.shape[0])
        rho = 10.0
        for _ in range(14):
            m = descend(m, mu, rho)
            mu = np.maximum(mu - rho * (gens @ m), 0.0)
            rho = min(rho * 4.0, 1e6)
        if float(np.abs(np.minimum(gens @ m, 0.0)).max(initial=0.0)) <= 1e-7:
            val = oracle.value(m)
            best = min(best, val)
    return best


def conjugacy_check(
    spec: IntegrandSpec,
    amb: AmbiguitySet,
    trial_count: int = 10,
    seed: int = 0,
) -> ConjugacyReport:
    """Numerically verify the finite-lattice conjugacy between the robust
    integral functional and the robust divergence.

    (a) for random measures the numerically maximized conjugate matches the
    robust divergence, (b) for random functions the dual maximum over
    measures attains the robust integral, and (c) for random finitely
    spanned convex cones the primal infimum equals minus the divergence
    minimum over the one-sided polar. Also checks the shifted-conjugate
    identity when the spec carries a shift. Residual target: 1e-4.
    """
    n = amb.lattice.n_paths
    if n > _HARNESS_MAX_PATHS:
        raise HarnessLimit(f"lattice has {n} paths; harness limit is {_HARNESS_MAX_PATHS}")
    rng = np.random.default_rng(seed)
    pmat = amb.matrix
    support = amb.support()
    base = pmat.mean(axis=0)

    res_a = 0.0
    res_b = 0.0
    neg_ok = True
    oracle = RobustDivergenceOracle(amb, spec)
    for _ in range(trial_count):
        # (a) random nu in the conjugate domain, supported on the hull
        scale = float(rng.uniform(0.3, 1.5))
        if spec.conjugate_nonneg:
            nu_w = rng.random(n) * base
            nu_w = scale * nu_w / max(nu_w.sum(), 1e-12)
        else:
            nu_w = rng.normal(scale=0.5, size=n) * support
        numeric = _numeric_conjugate(nu_w, spec, amb, rng)
        exact = oracle.value(nu_w)
        if np.isfinite(exact):
            res_a = max(res_a, abs(numeric - exact))
        # (b) random f: dual attainment at the generator-wise optimizer
        f = rng.normal(scale=1.0, size=n)
        vals = spec.eval_shifted(f)
        means = pmat @ vals
        k = int(np.argmax(means))
        integral = float(means[k])
        nu_star = pmat[k] * spec.eval_shifted_prime(f)
        attained = float(nu_star @ f) - oracle.value(nu_star)
        res_b = max(res_b, abs(attained - integral))

    # negative mass must blow up both sides when the conjugate domain is R+
    if spec.conjugate_nonneg:
        nu_bad = base.copy()
        j = int(np.argmax(base))
        nu_bad[j] = -0.1
        if np.isfinite(oracle.value(nu_bad)):
            neg_ok = False
        else:
            # the numeric sup grows without bound along -e_j
            probe = np.zeros(n)
            lo = -math.inf
            for t in (1e4, 1e6):
                probe[j] = -t
                val = float(nu_bad @ probe) - robust_integral(probe, spec, amb)
                lo = max(lo, val)
            neg_ok = lo > 1e3

    # (c) cones spanned by up to 3 random functions
    res_c = 0.0
    cone_trials = max(3, trial_count // 3)
    for _ in range(cone_trials):
        k = int(rng.integers(1, 4))
        gens = rng.normal(scale=1.0, size=(k, n))
        lhs = _numeric_cone_infimum(gens, spec, amb, rng)
        jmin = _numeric_polar_minimum(gens, spec, amb, rng)
        res_c = max(res_c, abs(lhs - (-jmin)))

    # shifted-conjugate identity on finite points
    res_shift = 0.0
    if spec.shift is not None:
        unshifted = spec.with_shift(None)
        plain = RobustDivergenceOracle(amb, unshifted)
        for _ in range(trial_count):
            nu_w = rng.random(n) * base
            nu_w = nu_w / max(nu_w.sum(), 1e-12)
            lhs = oracle.value(nu_w)
            rhs = plain.value(nu_w) - float(nu_w @ spec.shift)
            if np.isfinite(lhs) and np.isfinite(rhs):
                res_shift = max(res_shift, abs(lhs - rhs))

    return ConjugacyReport(
        max_residual_conjugate=res_a,
        max_residual_attainment=res_b,
        max_residual_cone=res_c,
        shift_identity_residual=res_shift,
        negative_mass_rejected=neg_ok,
        trials=trial_count,
    )
