"""Path lattice enumeration and the linear description of the calibrated martingale polytope."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .errors import LatticeMismatch, SizeLimit
from .market import MarginalSystem

DEFAULT_MAX_PATHS = 10**6
PROB_TOL = 1e-12


@dataclass(frozen=True)
class PathLattice:
    """All N-tuples over the marginal grids, enumerated lexicographically."""

    grids: Tuple[np.ndarray, ...]
    s0: float
    paths: np.ndarray          # (n_paths, N) values
    path_index: np.ndarray     # (n_paths, N) grid indices

    @property
    def n_periods(self) -> int:
        return len(self.grids)

    @property
    def n_paths(self) -> int:
        return int(self.paths.shape[0])

    @property
    def sizes(self) -> Tuple[int, ...]:
        return tuple(len(g) for g in self.grids)


def build_lattice(sys: MarginalSystem, max_paths: int = DEFAULT_MAX_PATHS) -> PathLattice:
    """Enumerate the product lattice of the marginal grids."""
    grids = tuple(m.grid.points for m in sys.marginals)
    total = 1
    for g in grids:
        total *= len(g)
    if total > max_paths:
        raise SizeLimit(f"path count {total} exceeds cap {max_paths}")
    idx = [np.arange(len(g)) for g in grids]
    mesh = np.meshgrid(*idx, indexing="ij")
    path_index = np.stack([m.reshape(-1) for m in mesh], axis=1)
    paths = np.column_stack([grids[i][path_index[:, i]] for i in range(len(grids))])
    return PathLattice(grids=grids, s0=float(sys.s0), paths=paths, path_index=path_index)


@dataclass
class PathMeasure:
    """Nonnegative weights over the lattice paths."""

    lattice: PathLattice
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (self.lattice.n_paths,):
            raise LatticeMismatch("weight vector does not match the lattice")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        if np.any(w < -PROB_TOL):
            raise ValueError("weights must be nonnegative")
        self.weights = np.maximum(w, 0.0)

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    @property
    def is_probability(self) -> bool:
        return abs(self.total_mass - 1.0) <= PROB_TOL

    def expectation(self, values: np.ndarray) -> float:
        return float(self.weights @ values)

    def pushforward(self, maturity: int) -> np.ndarray:
        """Marginal mass per grid point at the given maturity (1-based)."""
        i = maturity - 1
        out = np.zeros(len(self.lattice.grids[i]))
        np.add.at(out, self.lattice.path_index[:, i], self.weights)
        return out


@dataclass(frozen=True)
class PrefixNode:
    """One decision point of a predictable strategy: time t and history values."""

    t: int                       # 1-based trading date
    history: Tuple[float, ...]   # observed values (x_1 .. x_{t-1})
    start: int                   # first path index of the block sharing the history
    stop: int                    # one past the last path index


def prefix_nodes(lattice: PathLattice) -> List[PrefixNode]:
    """All prefix nodes, ordered by time then lexicographic history."""
    sizes = lattice.sizes
    n = lattice.n_periods
    strides = [1] * n
    for i in range(n - 2, -1, -1):
        strides[i] = strides[i + 1] * sizes[i + 1]
    nodes: List[PrefixNode] = []
    for t in range(1, n + 1):
        block = strides[t - 1] * sizes[t - 1]  # paths sharing a (t-1)-history
        count = 1
        for i in range(t - 1):
            count *= sizes[i]
        for j in range(count):
            start = j * block
            # decode lexicographic history indices
            hist_idx: List[int] = []
            rem = j
            for i in range(t - 2, -1, -1):
                hist_idx.append(rem % sizes[i])
                rem //= sizes[i]
            hist_idx.reverse()
            history = tuple(float(lattice.grids[i][hist_idx[i]]) for i in range(t - 1))
            nodes.append(PrefixNode(t=t, history=history, start=start, stop=start + block))
    return nodes


def dynamic_increment_matrix(lattice: PathLattice, nodes: List[PrefixNode]) -> np.ndarray:
    """Design matrix D with D[p, k] = S_t(p) - S_{t-1}(p) on node k's block, else 0.

    A dynamic strategy h gives per-path trading gains D @ h.
    """
    d = np.zeros((lattice.n_paths, len(nodes)))
    for k, node in enumerate(nodes):
        t = node.t
        prev = lattice.paths[node.start : node.stop, t - 2] if t >= 2 else lattice.s0
        d[node.start : node.stop, k] = lattice.paths[node.start : node.stop, t - 1] - prev
    return d


@dataclass(frozen=True)
class MartingalePolytope:
    """Equality rows + nonnegativity describing all calibrated martingale measures.

    Rows: one per marginal atom (pushforward mass) and one per prefix node
    (zero conditional increment). Redundant rows are kept on purpose.
    """

    lattice: PathLattice
    a_eq: np.ndarray
    b_eq: np.ndarray
    row_kinds: Tuple[Tuple, ...]   # ("marginal", i, g_idx) or ("martingale", node_pos)
    nodes: Tuple[PrefixNode, ...]

    @property
    def n_rows(self) -> int:
        return int(self.a_eq.shape[0])


def build_polytope(sys: MarginalSystem, max_paths: int = DEFAULT_MAX_PATHS) -> MartingalePolytope:
    """Assemble the marginal and martingale equality rows over the lattice."""
    lattice = build_lattice(sys, max_paths=max_paths)
    nodes = prefix_nodes(lattice)
    n = lattice.n_paths
    rows: List[np.ndarray] = []
    rhs: List[float] = []
    kinds: List[Tuple] = []
    for i, marg in enumerate(sys.marginals):
        idx = lattice.path_index[:, i]
        for g in range(len(marg.grid)):
            row = np.zeros(n)
            row[idx == g] = 1.0
            rows.append(row)
            rhs.append(float(marg.pmf[g]))
            kinds.append(("marginal", i + 1, g))
    dmat = dynamic_increment_matrix(lattice, nodes)
    for k in range(len(nodes)):
        rows.append(dmat[:, k].copy())
        rhs.append(0.0)
        kinds.append(("martingale", k))
    return MartingalePolytope(
        lattice=lattice,
        a_eq=np.array(rows),
        b_eq=np.array(rhs),
        row_kinds=tuple(kinds),
        nodes=tuple(nodes),
    )


@dataclass(frozen=True)
class FeasibilityVerdict:
    """Phase-1 outcome: a probability witness or a Farkas certificate."""

    feasible: bool
    witness: Optional[PathMeasure] = None
    certificate: Optional[np.ndarray] = field(default=None)  # y with y'A <= 0, y'b > 0


def feasibility(poly: MartingalePolytope, opts=None) -> FeasibilityVerdict:
    """Decide emptiness of the polytope by a phase-1 LP."""
    from .optimize import LinearProgram, SolveOptions, solve_lp

    lp = LinearProgram(
        c=np.zeros(poly.lattice.n_paths), a_eq=poly.a_eq, b_eq=poly.b_eq
    )
    sol = solve_lp(lp, opts or SolveOptions())
    if sol.status == "optimal":
        return FeasibilityVerdict(True, witness=PathMeasure(poly.lattice, sol.x))
    return FeasibilityVerdict(False, certificate=sol.certificate)


def support_mask(priors: List[PathMeasure]) -> np.ndarray:
    """Paths charged by at least one of the given measures."""
    mask = np.zeros(priors[0].lattice.n_paths, dtype=bool)
    for p in priors:
        mask |= p.weights > 0
    return mask
