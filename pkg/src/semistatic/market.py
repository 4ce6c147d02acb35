"""Calibration inputs: grids, marginals, call-quote inversion, convex-order checks."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import MeanMismatch, NonConvexQuotes

MASS_TOL = 1e-12
MEAN_TOL = 1e-9
QUOTE_MEAN_TOL = 1e-8
ORDER_SLACK = 1e-10


def _as_array(values: Sequence[float], name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-D sequence")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


@dataclass(frozen=True)
class Grid:
    """Strictly increasing finite support points for one maturity."""

    points: np.ndarray

    def __post_init__(self):
        pts = _as_array(self.points, "grid points")
        if pts.size > 1 and not np.all(np.diff(pts) > 0):
            raise ValueError("grid points must be strictly increasing")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return int(self.points.size)


@dataclass(frozen=True)
class Marginal:
    """Probability mass function on a grid."""

    grid: Grid
    pmf: np.ndarray

    def __post_init__(self):
        pmf = _as_array(self.pmf, "pmf")
        if pmf.size != len(self.grid):
            raise ValueError("pmf length must match grid length")
        if np.any(pmf < 0):
            raise ValueError("pmf entries must be nonnegative")
        if abs(pmf.sum() - 1.0) > MASS_TOL:
            raise ValueError(f"pmf must sum to 1 within {MASS_TOL}, got {pmf.sum()!r}")
        object.__setattr__(self, "pmf", pmf)

    def mean(self) -> float:
        return float(self.pmf @ self.grid.points)


@dataclass(frozen=True)
class MarginalSystem:
    """Spot plus one marginal per maturity: the full calibration data."""

    s0: float
    marginals: Tuple[Marginal, ...]

    def __post_init__(self):
        if not np.isfinite(self.s0):
            raise ValueError("s0 must be finite")
        margs = tuple(self.marginals)
        if len(margs) < 1:
            raise ValueError("need at least one marginal")
        object.__setattr__(self, "marginals", margs)

    @property
    def n_periods(self) -> int:
        return len(self.marginals)


@dataclass(frozen=True)
class CallQuoteCurve:
    """Quoted call prices at one maturity, validated for static arbitrage.

    Prices must be nonnegative, non-increasing in strike and convex in strike
    (divided second differences >= -1e-10 on a possibly non-uniform grid).
    """

    maturity_index: int
    strikes: np.ndarray
    prices: np.ndarray

    def __post_init__(self):
        if int(self.maturity_index) < 1:
            raise ValueError("maturity_index must be >= 1")
        object.__setattr__(self, "maturity_index", int(self.maturity_index))
        strikes = _as_array(self.strikes, "strikes")
        prices = _as_array(self.prices, "prices")
        if strikes.size != prices.size:
            raise NonConvexQuotes("strikes and prices must have equal length")
        if strikes.size > 1 and not np.all(np.diff(strikes) > 0):
            raise NonConvexQuotes("strikes must be strictly increasing")
        if np.any(prices < -1e-12):
            raise NonConvexQuotes("negative call prices")
        if strikes.size > 1 and np.any(np.diff(prices) > 1e-10):
            raise NonConvexQuotes("call prices must be non-increasing in strike")
        if strikes.size > 2:
            slopes = np.diff(prices) / np.diff(strikes)
            if np.any(np.diff(slopes) < -1e-10):
                raise NonConvexQuotes("call prices must be convex in strike")
        object.__setattr__(self, "strikes", strikes)
        object.__setattr__(self, "prices", prices)


def marginal_from_call_quotes(curve: CallQuoteCurve, s0: float) -> Marginal:
    """Invert quoted call prices into the unique pmf on the strike grid.

    The pmf solves sum_j p_j (K_j - K_i)^+ = price_i exactly at every quoted
    strike; the leftmost atom absorbs the remaining mass so the total is 1.
    Raises NonConvexQuotes when no nonnegative solution exists and
    MeanMismatch when the implied mean is not s0 within 1e-8.
    """
    strikes = curve.strikes
    prices = curve.prices
    n = strikes.size
    if n < 2:
        raise NonConvexQuotes("a single quote cannot determine a distribution")
    scale = 1.0 + float(np.max(np.abs(prices)))
    if prices[-1] > 1e-10 * scale:
        raise NonConvexQuotes(
            "positive call value beyond the last strike: support not covered"
        )
    pmf = np.zeros(n)
    # back-substitution: equation at strike i pins the atom at strike i+1
    for i in range(n - 2, -1, -1):
        acc = pmf[i + 2 :] @ (strikes[i + 2 :] - strikes[i])
        pmf[i + 1] = (prices[i] - acc) / (strikes[i + 1] - strikes[i])
    pmf[0] = 1.0 - pmf[1:].sum()
    if np.any(pmf < -1e-10):
        raise NonConvexQuotes("quotes imply negative probability mass")
    pmf = np.maximum(pmf, 0.0)
    pmf = pmf / pmf.sum()
    mean = pmf @ strikes
    if abs(mean - s0) > QUOTE_MEAN_TOL:
        raise MeanMismatch(f"implied mean {mean!r} differs from s0={s0!r}")
    return Marginal(Grid(strikes), pmf)


def call_function(m: Marginal, k: float) -> float:
    """Expected call payoff E[(X - k)^+] under the marginal."""
    return float(m.pmf @ np.maximum(m.grid.points - k, 0.0))


def call_curve(m: Marginal, ks: np.ndarray) -> np.ndarray:
    """Vectorized call_function over an array of strikes."""
    ks = np.asarray(ks, dtype=float)
    return np.maximum(m.grid.points[None, :] - ks[:, None], 0.0) @ m.pmf


@dataclass(frozen=True)
class StrassenVerdict:
    """Outcome of the convex-order / equal-mean feasibility test."""

    feasible: bool
    means: Tuple[float, ...]
    # first violation: ("mean", i, value) or ("order", i, strike) with i 1-based
    violation: Optional[Tuple] = field(default=None)


def check_strassen(
    sys: MarginalSystem,
    *,
    mean_tol: float = MEAN_TOL,
    order_slack: float = ORDER_SLACK,
) -> StrassenVerdict:
    """Feasibility of a calibrated martingale measure for the marginal system.

    Feasible iff every marginal mean equals s0 within mean_tol and call
    functions are pointwise nondecreasing across consecutive maturities at
    every strike of the union grid (exact for piecewise-linear call curves).
    """
    means = tuple(m.mean() for m in sys.marginals)
    for i, mean in enumerate(means):
        if abs(mean - sys.s0) > mean_tol:
            return StrassenVerdict(False, means, ("mean", i + 1, mean))
    for i in range(sys.n_periods - 1):
        lo, hi = sys.marginals[i], sys.marginals[i + 1]
        ks = np.union1d(lo.grid.points, hi.grid.points)
        gap = call_curve(hi, ks) - call_curve(lo, ks)
        bad = np.flatnonzero(gap < -order_slack)
        if bad.size:
            return StrassenVerdict(False, means, ("order", i + 1, float(ks[bad[0]])))
    return StrassenVerdict(True, means)
