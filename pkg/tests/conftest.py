"""Shared fixtures: canonical instances and random-instance generators."""
from __future__ import annotations

import numpy as np
import pytest

from semistatic.market import Grid, Marginal, MarginalSystem
from semistatic.polytope import PathMeasure, build_lattice


@pytest.fixture
def unique_sys() -> MarginalSystem:
    """Two-period system whose martingale polytope is a single point."""
    m1 = Marginal(Grid([-1.0, 1.0]), [0.5, 0.5])
    m2 = Marginal(Grid([-2.0, 0.0, 2.0]), [0.25, 0.5, 0.25])
    return MarginalSystem(0.0, (m1, m2))


@pytest.fixture
def unique_coupling(unique_sys):
    """The unique calibrated martingale measure of unique_sys."""
    lattice = build_lattice(unique_sys)
    return PathMeasure(lattice, np.array([0.25, 0.25, 0.0, 0.0, 0.25, 0.25]))


@pytest.fixture
def wide_sys() -> MarginalSystem:
    """Two-period system with a non-unique polytope (4 terminal atoms)."""
    m1 = Marginal(Grid([-1.0, 1.0]), [0.5, 0.5])
    m2 = Marginal(Grid([-3.0, -1.0, 1.0, 3.0]), [0.2, 0.3, 0.3, 0.2])
    return MarginalSystem(0.0, (m1, m2))


def random_marginal(rng: np.random.Generator, size: int, spread: float = 2.0,
                    center: float = 0.0, force_mean: bool = True) -> Marginal:
    """Random discrete marginal; force_mean tilts the pmf so the mean is exact."""
    pts = np.sort(rng.uniform(center - spread, center + spread, size=size))
    while np.any(np.diff(pts) < 1e-6):
        pts = np.sort(rng.uniform(center - spread, center + spread, size=size))
    pmf = rng.random(size) + 0.05
    pmf /= pmf.sum()
    if force_mean and size > 1:
        mean = pmf @ pts
        var = pmf @ (pts - mean) ** 2
        if var > 1e-12:
            theta = (center - mean) / var
            tilted = pmf * (1.0 + theta * (pts - mean))
            if np.all(tilted > 1e-12):
                pmf = tilted / tilted.sum()
            else:
                # fall back to a symmetric construction with the exact mean
                pmf = np.full(size, 1.0 / size)
                pts = center + (pts - pts @ pmf)
                pts = np.sort(pts)
    return Marginal(Grid(pts), pmf)


def coarsen(marg: Marginal, rng: np.random.Generator) -> Marginal:
    """Merge one adjacent atom pair at its barycenter: a convex-order shrink."""
    pts = marg.grid.points
    pmf = marg.pmf
    if len(pts) < 2:
        return marg
    j = int(rng.integers(0, len(pts) - 1))
    w = pmf[j] + pmf[j + 1]
    if w <= 0:
        return marg
    new_pt = (pmf[j] * pts[j] + pmf[j + 1] * pts[j + 1]) / w
    pts2 = np.concatenate([pts[:j], [new_pt], pts[j + 2:]])
    pmf2 = np.concatenate([pmf[:j], [w], pmf[j + 2:]])
    order = np.argsort(pts2)
    pts2, pmf2 = pts2[order], pmf2[order]
    keep = np.ones(len(pts2), dtype=bool)
    for i in range(1, len(pts2)):
        if pts2[i] - pts2[i - 1] < 1e-9:
            pmf2[i] += pmf2[i - 1]
            keep[i - 1] = False
    return Marginal(Grid(pts2[keep]), pmf2[keep] / pmf2[keep].sum())


def random_system(rng: np.random.Generator, n_periods: int, max_grid: int = 6,
                  feasible: bool = True, s0: float = 0.0) -> MarginalSystem:
    """Random marginal system; feasible=True builds a convex-order chain by
    coarsening the terminal law backwards, otherwise marginals are independent
    (means matched to s0 only half the time)."""
    if feasible:
        last = random_marginal(rng, int(rng.integers(2, max_grid + 1)),
                               spread=2.5, center=s0)
        chain = [last]
        for _ in range(n_periods - 1):
            prev = chain[0]
            for _ in range(int(rng.integers(1, 3))):
                prev = coarsen(prev, rng)
            chain.insert(0, prev)
        return MarginalSystem(s0, tuple(chain))
    margs = []
    for _ in range(n_periods):
        force = bool(rng.random() < 0.5)
        margs.append(
            random_marginal(rng, int(rng.integers(2, max_grid + 1)),
                            spread=2.5, center=s0, force_mean=force)
        )
    return MarginalSystem(s0, tuple(margs))
