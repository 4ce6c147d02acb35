"""Self-contained numerical engines: dense simplex LP, Frank-Wolfe over the
martingale polytope, golden-section search, and minimization over weight simplices.

All engines are deterministic for fixed options and reentrant; nothing here
holds state between calls except explicit warm-start arguments.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import BracketInvalid, InfeasiblePolytope, IterationLimit

_INVGOLD = (math.sqrt(5.0) - 1.0) / 2.0

DEFAULT_MAX_PIVOTS = 10**6
DEFAULT_MAX_FW_ITER = 5 * 10**4
DEFAULT_MAX_SCALAR_ITER = 200
DEFAULT_MAX_SIMPLEX_WEIGHT_ITER = 20_000


@dataclass(frozen=True)
class SolveOptions:
    """Shared solver knobs.

    max_iterations of None means each engine applies its own default
    (simplex 1e6 pivots, Frank-Wolfe 5e4 iterations, 1-D search 200 probes).
    """

    tolerance: float = 1e-9
    max_iterations: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ValueError("iteration cap must be >= 1")


@dataclass(frozen=True)
class LinearProgram:
    """min c.x  s.t.  a_eq x = b_eq,  x >= 0."""

    c: np.ndarray
    a_eq: np.ndarray
    b_eq: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float)
        a = np.asarray(self.a_eq, dtype=float)
        b = np.asarray(self.b_eq, dtype=float)
        if a.ndim != 2 or c.ndim != 1 or b.ndim != 1:
            raise ValueError("bad LP shapes")
        if a.shape != (b.size, c.size):
            raise ValueError("inconsistent LP dimensions")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b)) and np.all(np.isfinite(c))):
            raise ValueError("LP data must be finite")
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "a_eq", a)
        object.__setattr__(self, "b_eq", b)


@dataclass
class LPSolution:
    status: str                      # "optimal" | "infeasible" | "unbounded"
    value: float
    x: Optional[np.ndarray] = None
    duals: Optional[np.ndarray] = None
    basis: Optional[List[int]] = None
    pivots: int = 0
    certificate: Optional[np.ndarray] = None  # Farkas y: y'A <= 0, y'b > 0


_STALL_BEFORE_BLAND = 100


def _simplex(a, b, c, basis, *, tol, max_pivots):
    """Primal simplex from a feasible basis.

    Dantzig pricing with a permanent switch to Bland's rule after a
    degeneracy stall; ties in the ratio test always leave the smallest
    basis column, so runs are deterministic.
    Returns (status, basis, pivots) with status "optimal" or "unbounded".
    """
    m, _ = a.shape
    basis = list(basis)
    bland = False
    stall = 0
    last_obj = math.inf
    pivots = 0
    while pivots < max_pivots:
        bmat = a[:, basis]
        xb = np.linalg.solve(bmat, b)
        y = np.linalg.solve(bmat.T, c[basis])
        reduced = c - a.T @ y
        reduced[basis] = 0.0
        if bland:
            negative = np.flatnonzero(reduced < -tol)
            if negative.size == 0:
                return "optimal", basis, pivots
            enter = int(negative[0])
        else:
            enter = int(np.argmin(reduced))
            if reduced[enter] >= -tol:
                return "optimal", basis, pivots
        direction = np.linalg.solve(bmat, a[:, enter])
        positive = direction > tol
        if not positive.any():
            return "unbounded", basis, pivots
        ratios = np.full(m, math.inf)
        ratios[positive] = np.maximum(xb[positive], 0.0) / direction[positive]
        theta = ratios.min()
        ties = np.flatnonzero(ratios <= theta + tol * (1.0 + abs(theta)))
        leave_pos = int(ties[np.argmin([basis[i] for i in ties])])
        obj = float(c[basis] @ xb)
        if obj >= last_obj - 1e-13 * (1.0 + abs(obj)):
            stall += 1
            if stall >= _STALL_BEFORE_BLAND:
                bland = True
        else:
            stall = 0
        last_obj = obj
        basis[leave_pos] = enter
        pivots += 1
    raise IterationLimit(f"simplex exceeded {max_pivots} pivots")


def _reduce_rows(a, b, tol):
    """Gaussian elimination to a maximal independent row subset.

    Returns (kept_row_indices, farkas_certificate_or_None): a dependent row
    with an inconsistent right-hand side yields the eliminating combination
    as an exact infeasibility certificate (y'A ~ 0, y'b > 0).
    """
    m, n = a.shape
    work = np.hstack([a, b[:, None]]).astype(float)
    elim = np.eye(m)
    pivots = []  # (row, col) of accepted pivot rows
    kept = []
    b_scale = 1.0 + float(np.abs(b).max(initial=0.0))
    for i in range(m):
        r = work[i]
        e = elim[i]
        for kr, kc in pivots:
            factor = r[kc] / work[kr, kc]
            if factor != 0.0:
                r -= factor * work[kr]
                e -= factor * elim[kr]
        scale = 1.0 + float(np.abs(a[i]).max(initial=0.0))
        if float(np.abs(r[:n]).max(initial=0.0)) > 1e-9 * scale:
            pc = int(np.argmax(np.abs(r[:n])))
            pivots.append((i, pc))
            kept.append(i)
        elif abs(r[n]) > 1e-9 * b_scale:
            y = e if r[n] > 0 else -e
            return kept, y
    return kept, None


def _drive_out_artificials(a, b, basis, n_orig, tol):
    """Pivot artificial columns out of the basis; drop rows that prove redundant.

    Returns (a, b, basis, kept_rows) on the reduced system whose columns are
    the original ones only.
    """
    m = a.shape[0]
    keep = np.ones(m, dtype=bool)
    for pos in range(m):
        col = basis[pos]
        if col < n_orig:
            continue
        bmat = a[:, basis]
        e = np.zeros(m)
        e[pos] = 1.0
        u = np.linalg.solve(bmat.T, e)
        row = u @ a[:, :n_orig]
        candidates = np.flatnonzero(np.abs(row) > 1e-9)
        candidates = [j for j in candidates if j not in basis]
        if candidates:
            basis[pos] = int(candidates[0])
        else:
            keep[pos] = False  # row is a linear combination of the others
    rows = np.flatnonzero(keep)
    a_red = a[rows][:, :n_orig]
    b_red = b[rows]
    basis_red = [basis[i] for i in rows]
    return a_red, b_red, basis_red, rows


def _phase_one(a, b, *, tol, max_pivots):
    """Find a feasible basis for a x = b, x >= 0, or a Farkas certificate.

    Dependent rows are eliminated up front (yielding exact certificates for
    inconsistent ones), so the reduced system has full row rank and every
    artificial can be driven out of the final basis.
    Returns (feasible, a_red, b_red, basis, kept_rows, certificate, pivots);
    a_red/b_red have redundant rows removed and original columns only.
    """
    m_full = a.shape[0]
    kept, cert = _reduce_rows(a, b, tol)
    if cert is not None:
        return False, None, None, None, None, cert, 0
    a = a[kept]
    b = b[kept]
    m, n = a.shape
    a1 = np.hstack([a, np.eye(m)])
    c1 = np.concatenate([np.zeros(n), np.ones(m)])
    basis = list(range(n, n + m))
    status, basis, pivots = _simplex(a1, b, c1, basis, tol=tol, max_pivots=max_pivots)
    bmat = a1[:, basis]
    xb = np.linalg.solve(bmat, b)
    value = float(c1[basis] @ xb)
    if value > tol * (1.0 + float(np.abs(b).sum())):
        y_red = np.linalg.solve(bmat.T, c1[basis])
        y = np.zeros(m_full)
        y[kept] = y_red
        return False, None, None, None, None, y, pivots
    a_red, b_red, basis_red, rows = _drive_out_artificials(a1, b, basis, n, tol)
    kept_abs = np.asarray(kept)[rows]
    return True, a_red, b_red, basis_red, kept_abs, None, pivots


def solve_lp(
    lp: LinearProgram,
    opts: Optional[SolveOptions] = None,
    *,
    initial_basis: Optional[Sequence[int]] = None,
) -> LPSolution:
    """Two-phase dense simplex for equality-form LPs with x >= 0.

    On "optimal" the solution carries the primal point, equality duals and
    the final basis; on "infeasible" it carries a Farkas certificate y with
    y'A <= 0 and y'b > 0.
    """
    opts = opts or SolveOptions()
    tol = opts.tolerance
    max_pivots = opts.max_iterations or DEFAULT_MAX_PIVOTS
    m, n = lp.a_eq.shape
    flip = np.where(lp.b_eq < 0, -1.0, 1.0)
    a = lp.a_eq * flip[:, None]
    b = lp.b_eq * flip
    c = lp.c
    pivots = 0

    basis = None
    kept_rows = np.arange(m)
    if initial_basis is not None and len(initial_basis) == m:
        try:
            cand = list(int(j) for j in initial_basis)
            xb = np.linalg.solve(a[:, cand], b)
            if np.all(xb >= -tol * (1.0 + np.abs(b).max(initial=0.0))):
                basis = cand
        except np.linalg.LinAlgError:
            basis = None
    if basis is None:
        feasible, a_red, b_red, basis, kept_rows, cert, p1 = _phase_one(
            a, b, tol=tol, max_pivots=max_pivots
        )
        pivots += p1
        if not feasible:
            return LPSolution(
                status="infeasible",
                value=math.inf,
                certificate=cert * flip,
                pivots=pivots,
            )
        a, b = a_red, b_red

    status, basis, p2 = _simplex(a, b, c, basis, tol=tol, max_pivots=max_pivots - pivots)
    pivots += p2
    if status == "unbounded":
        return LPSolution(status="unbounded", value=-math.inf, pivots=pivots)
    bmat = a[:, basis]
    xb = np.linalg.solve(bmat, b)
    x = np.zeros(n)
    x[basis] = np.maximum(xb, 0.0)
    y_red = np.linalg.solve(bmat.T, c[basis])
    duals = np.zeros(m)
    duals[kept_rows] = y_red
    duals *= flip
    return LPSolution(
        status="optimal",
        value=float(c @ x),
        x=x,
        duals=duals,
        basis=list(basis),
        pivots=pivots,
    )


class PolytopeOracle:
    """Warm-started vertex oracle: min g.q over an equality polytope.

    Phase 1 runs once at construction; subsequent calls re-optimize from the
    previous optimal basis, which makes repeated calls with slowly varying
    objectives cheap. An optional column mask restricts support.
    """

    def __init__(
        self,
        a_eq: np.ndarray,
        b_eq: np.ndarray,
        opts: Optional[SolveOptions] = None,
        *,
        column_mask: Optional[np.ndarray] = None,
    ):
        self.opts = opts or SolveOptions()
        self.n_full = a_eq.shape[1]
        if column_mask is None:
            self.columns = np.arange(self.n_full)
        else:
            self.columns = np.flatnonzero(np.asarray(column_mask, dtype=bool))
        a = a_eq[:, self.columns]
        flip = np.where(b_eq < 0, -1.0, 1.0)
        a = a * flip[:, None]
        b = b_eq * flip
        feasible, a_red, b_red, basis, _, _, _ = _phase_one(
            a, b, tol=self.opts.tolerance, max_pivots=DEFAULT_MAX_PIVOTS
        )
        if not feasible:
            raise InfeasiblePolytope("no feasible point with the requested support")
        self.a = a_red
        self.b = b_red
        self.basis = basis

    def feasible_point(self) -> np.ndarray:
        x = np.zeros(self.n_full)
        xb = np.linalg.solve(self.a[:, self.basis], self.b)
        x[self.columns[self.basis]] = np.maximum(xb, 0.0)
        return x

    def minimize(self, gradient: np.ndarray) -> Tuple[np.ndarray, float]:
        """Return (vertex, objective value) minimizing gradient . q."""
        c = gradient[self.columns]
        status, basis, _ = _simplex(
            self.a, self.b, c, self.basis,
            tol=self.opts.tolerance, max_pivots=DEFAULT_MAX_PIVOTS,
        )
        if status != "optimal":
            raise InfeasiblePolytope("polytope is unbounded; mass rows missing")
        self.basis = basis
        x = np.zeros(self.n_full)
        xb = np.linalg.solve(self.a[:, basis], self.b)
        x[self.columns[basis]] = np.maximum(xb, 0.0)
        return x, float(gradient @ x)


@dataclass(frozen=True)
class SmoothObjective:
    """Convex objective with gradient; value may return +inf outside its domain.

    line_factory, when given, maps (q, d) to a cheap upper-bound model of
    t -> value(q + t d) that is tight with matching slope at t = 0 (a
    majorize-minimize surrogate); the line search then avoids re-solving any
    nested minimization per probe while every accepted step still decreases
    the true objective.
    """

    value: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    line_factory: Optional[Callable[[np.ndarray, np.ndarray], Callable[[float], float]]] = None


@dataclass
class FWResult:
    weights: np.ndarray
    value: float
    gap: float
    iterations: int
    converged: bool


def _golden_section(f, lo, hi, *, max_iter, rel_tol, seeds=()):
    """Golden-section minimization on [lo, hi]; returns best probed (x, f(x)).

    Tracks endpoints and optional seed probes so the returned value is the
    minimum over everything evaluated; safe for convex f.
    """
    best_x, best_f = lo, f(lo)
    for x in (hi, *seeds):
        fx = f(x)
        if fx < best_f:
            best_x, best_f = x, fx
    a, b = lo, hi
    x1 = b - _INVGOLD * (b - a)
    x2 = a + _INVGOLD * (b - a)
    f1, f2 = f(x1), f(x2)
    for x, fx in ((x1, f1), (x2, f2)):
        if fx < best_f:
            best_x, best_f = x, fx
    span = hi - lo
    for _ in range(max_iter):
        if (b - a) <= rel_tol * span:
            break
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - _INVGOLD * (b - a)
            f1 = f(x1)
            if f1 < best_f:
                best_x, best_f = x1, f1
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + _INVGOLD * (b - a)
            f2 = f(x2)
            if f2 < best_f:
                best_x, best_f = x2, f2
    return best_x, best_f


def _line_search_scalar(phi, f0, *, max_iter=32):
    """Minimize a convex phi(t) on [0, 1] with phi(0) = f0.

    Shrinks the right endpoint geometrically while the objective is +inf
    (divergence barriers), then golden-sections the finite segment.
    """
    t_hi = 1.0
    f_hi = phi(1.0)
    shrink = 0
    while not np.isfinite(f_hi) and shrink < 60:
        t_hi *= 0.5
        f_hi = phi(t_hi)
        shrink += 1
    if not np.isfinite(f_hi):
        return 0.0, f0
    t, ft = _golden_section(phi, 0.0, t_hi, max_iter=max_iter, rel_tol=1e-12)
    if ft >= f0:
        return 0.0, f0
    return t, ft


def _line_search(value_fn, q, d, f0, *, max_iter=32):
    """Exact 1-D minimization of t -> value_fn(q + t d) on [0, 1]."""
    return _line_search_scalar(lambda t: value_fn(q + t * d), f0, max_iter=max_iter)


def frank_wolfe_min(
    poly,
    objective: SmoothObjective,
    opts: Optional[SolveOptions] = None,
    *,
    start: Optional[np.ndarray] = None,
    oracle: Optional[PolytopeOracle] = None,
    column_mask: Optional[np.ndarray] = None,
) -> FWResult:
    """Conditional-gradient minimization of a smooth convex objective over
    the martingale polytope.

    Iterates stay feasible (convex combinations of LP vertices); the returned
    gap is the final Frank-Wolfe certificate g.(q - s) which upper-bounds the
    suboptimality. Exact line search keeps divergence barriers respected by
    shrinking into the finite region. Soft iteration cap: returns best
    iterate with converged=False instead of raising.
    """
    opts = opts or SolveOptions()
    max_iter = opts.max_iterations or DEFAULT_MAX_FW_ITER
    if oracle is None:
        oracle = PolytopeOracle(poly.a_eq, poly.b_eq, opts, column_mask=column_mask)
    q = oracle.feasible_point() if start is None else np.asarray(start, dtype=float)
    fq = objective.value(q)
    if not np.isfinite(fq):
        q = oracle.feasible_point()
        fq = objective.value(q)
    best_q, best_f = q, fq
    gap = math.inf
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        g = objective.gradient(q)
        s, sval = oracle.minimize(g)
        gap = float(g @ q) - sval
        if gap <= opts.tolerance:
            converged = True
            break
        d = s - q
        t = 0.0
        if objective.line_factory is not None:
            phi = objective.line_factory(q, d)
            t, _ = _line_search_scalar(phi, fq)
            if t > 0.0:
                q_new = np.maximum(q + t * d, 0.0)
                ft = objective.value(q_new)
                if ft >= fq:  # surrogate step did not help the true objective
                    t = 0.0
                else:
                    q, fq = q_new, ft
        if t <= 0.0 and (objective.line_factory is None or gap > 100.0 * opts.tolerance):
            # no factory, or a loose surrogate while far from optimal:
            # search the true values instead
            t, ft = _line_search(objective.value, q, d, fq)
            if t > 0.0:
                q = np.maximum(q + t * d, 0.0)
                fq = ft
        if t <= 0.0:
            break  # line search cannot improve: numerical floor reached
        if fq < best_f:
            best_q, best_f = q, fq
    return FWResult(
        weights=best_q, value=best_f, gap=gap, iterations=iterations, converged=converged
    )


def minimize_convex_1d(
    f: Callable[[float], float],
    bracket: Tuple[float, float],
    opts: Optional[SolveOptions] = None,
) -> Tuple[float, float]:
    """Golden-section minimization of a convex scalar function on a bracket.

    Returns (argmin, min) within tolerance * (hi - lo) of the true argmin for
    unimodal f. Raises BracketInvalid on a bad bracket or non-finite values.
    """
    opts = opts or SolveOptions()
    lo, hi = float(bracket[0]), float(bracket[1])
    if not (np.isfinite(lo) and np.isfinite(hi)) or lo >= hi:
        raise BracketInvalid(f"bad bracket {bracket!r}")
    max_iter = opts.max_iterations or DEFAULT_MAX_SCALAR_ITER
    seen_bad = []

    def wrapped(x):
        v = f(x)
        if not np.isfinite(v):
            seen_bad.append(x)
            return math.inf
        return v

    x, fx = _golden_section(wrapped, lo, hi, max_iter=max_iter, rel_tol=opts.tolerance)
    if not np.isfinite(fx):
        raise BracketInvalid("objective not finite anywhere on the bracket")
    return x, fx


@dataclass
class SimplexResult:
    weights: np.ndarray
    value: float
    gap: float
    iterations: int
    converged: bool


def minimize_over_simplex(
    g: Callable[[np.ndarray], float],
    m: int,
    opts: Optional[SolveOptions] = None,
    *,
    grad: Callable[[np.ndarray], np.ndarray],
    w0: Optional[np.ndarray] = None,
) -> SimplexResult:
    """Exponentiated-gradient minimization of a convex g over the m-simplex.

    Each iteration follows the multiplicative update w <- w exp(-eta grad)
    with the step eta chosen by a golden-section search along the update
    curve (the selected steps shrink as the iterate converges); the
    linearization gap w.grad - min(grad) certifies eps-optimality and stops
    the loop. Soft iteration cap: returns the best iterate seen.
    """
    opts = opts or SolveOptions()
    max_iter = opts.max_iterations or DEFAULT_MAX_SIMPLEX_WEIGHT_ITER
    if m < 1:
        raise ValueError("simplex dimension must be >= 1")
    if m == 1:
        w = np.ones(1)
        return SimplexResult(w, g(w), 0.0, 0, True)
    # iterates are floored away from the boundary so a later warm start can
    # still escape a vertex with fp-detectable progress
    floor = 1e-12

    def clean(w):
        w = np.maximum(w, floor)
        return w / w.sum()

    w = clean(np.full(m, 1.0 / m) if w0 is None else np.asarray(w0, dtype=float))
    val = g(w)
    best_w, best_val = w, val
    gap = math.inf
    converged = False
    iterations = 0
    eta = None
    kicks = 0
    for iterations in range(1, max_iter + 1):
        gr = grad(w)
        gap = float(w @ gr - gr.min())
        if gap <= opts.tolerance:
            converged = True
            break
        if eta is None:
            eta = 1.0 / (1.0 + float(np.abs(gr).max()))

        def move(step):
            z = -step * (gr - gr.min())
            return clean(w * np.exp(np.minimum(z, 700.0)))

        eta = min(eta * 2.0, 1e6)  # optimistic growth, then backtrack
        improved = False
        for _ in range(16):
            w_new = move(eta)
            val_new = g(w_new)
            if val_new < val - 1e-17 * (1.0 + abs(val)):
                improved = True
                break
            eta *= 0.25
        if not improved:
            if gap > max(10.0 * opts.tolerance, 1e-9) and kicks < 4:
                # stalled far from optimality: restart from a mixed iterate
                kicks += 1
                w = clean(0.5 * w + 0.5 / m)
                val = g(w)
                eta = None
                continue
            break  # flat along the update curve to fp precision
        w, val = w_new, val_new
        if val < best_val:
            best_w, best_val = w, val
    return SimplexResult(best_w, best_val, gap, iterations, converged)
