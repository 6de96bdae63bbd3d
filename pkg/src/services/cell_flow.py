"""
Unmatched mass between two cell measures on one grid.

Both measures are unit-normalized cell grids of the same torus. For a
threshold K (a squared cell offset) the deficit f(K) is the mass a maximum
flow leaves unmatched when mass may only move between cells whose centers
differ by an offset of squared norm <= K.

Deficits are resolved in three stages of increasing cost:

    block aggregation and dilated level sets -> scaled integer max-flow
    (scipy, Dinic) -> exact minimum cut (networkx)

The first two give certified intervals around f(K); the exact cut is only
computed when they cannot settle the question asked. Edge lists depend on
(n, d, K) alone and are shared by every pair of measures on that grid.
"""

import functools
import logging
import math
from typing import Dict, Iterator, List, Optional, Tuple

import networkx as nx
import numpy as np
from networkx.algorithms.flow import shortest_augmenting_path
from scipy import fft, ndimage, sparse
from scipy.sparse.csgraph import maximum_flow

from models import Measure, TorusGeometry
from services import torus

logger = logging.getLogger(__name__)

SOURCE = "s"
SINK = "t"

# integer capacities are floor(mass * FLOW_SCALE); middle edges never saturate
FLOW_SCALE = 2 ** 29
UNBOUNDED = 2 ** 30

# slack for bounds computed with plain float sums
MARGIN = 1e-9

Interval = Tuple[float, float]


@functools.lru_cache(maxsize=16)
def offset_table(n: int, d: int) -> Tuple[np.ndarray, np.ndarray]:
    """All wrapped grid offsets, shape (n^d, d), and their squared torus norms, sorted by norm."""
    axis = np.array([torus.wrap_index(i, n) for i in range(n)], dtype=np.int64)
    grids = np.meshgrid(*([axis] * d), indexing="ij")
    offsets = np.stack([g.reshape(-1) for g in grids], axis=1)
    sq = np.sum(offsets * offsets, axis=1)
    order = np.argsort(sq, kind="stable")
    offsets, sq = offsets[order], sq[order]
    offsets.setflags(write=False)
    sq.setflags(write=False)
    return offsets, sq


def distance_levels(n: int, d: int) -> np.ndarray:
    """Distinct squared offset norms of the grid, ascending."""
    return np.unique(offset_table(n, d)[1])


@functools.lru_cache(maxsize=32)
def cell_edges(n: int, d: int, K: int) -> Tuple[np.ndarray, np.ndarray]:
    """Flat (source cell, target cell) pairs whose offset has squared norm <= K."""
    offsets, sq = offset_table(n, d)
    chosen = offsets[sq <= K]
    shape = (n,) * d
    cells = np.indices(shape).reshape(d, -1)
    moved = (cells[:, :, None] + chosen.T[:, None, :]) % n
    dst = np.ravel_multi_index(tuple(moved), shape).reshape(-1)
    src = np.repeat(np.arange(n ** d), len(chosen))
    src.setflags(write=False)
    dst.setflags(write=False)
    return src, dst


@functools.lru_cache(maxsize=32)
def ball_footprint(n: int, d: int, K: int) -> Optional[np.ndarray]:
    """Boolean footprint of the offsets with squared norm <= K; None once the ball wraps the torus."""
    if K < 0:
        return None
    R = math.isqrt(K)
    if 2 * R + 1 > n:
        return None
    axis = np.arange(-R, R + 1)
    grids = np.meshgrid(*([axis] * d), indexing="ij")
    footprint = sum(g * g for g in grids) <= K
    footprint.setflags(write=False)
    return footprint


def dilate(mask: np.ndarray, footprint: np.ndarray) -> np.ndarray:
    """Cells within the footprint of some cell of the mask, wrapping around the torus."""
    grown = ndimage.maximum_filter(mask.astype(np.uint8), footprint=footprint, mode="wrap")
    return grown.astype(bool)


def level_sets(grid: np.ndarray) -> Iterator[np.ndarray]:
    """Support and upper level sets of a nonnegative grid."""
    positive = grid[grid > 0]
    if positive.size == 0:
        return
    yield grid > 0
    for q in (50, 90):
        yield grid >= np.percentile(positive, q)


def unit_grid(mu: Measure) -> np.ndarray:
    """Cell masses of mu divided by its total; zeros stay zeros."""
    total = torus.total_mass(mu)
    grid = mu.grid()
    return grid / total if total > 0 else grid


def _settled(interval: Interval, threshold: float) -> Optional[bool]:
    lo, hi = interval
    if hi < threshold - MARGIN:
        return True
    if lo > threshold + MARGIN:
        return False
    return None


class CellFlow:
    """
    Deficit oracle between two unit-normalized cell grids of one torus.

    Interval and exact results are cached per threshold K.
    """

    def __init__(self, geometry: TorusGeometry, a: np.ndarray, b: np.ndarray):
        self.geometry = geometry
        self.a = np.asarray(a, dtype=float).reshape(geometry.shape)
        self.b = np.asarray(b, dtype=float).reshape(geometry.shape)
        self.a_flat = self.a.reshape(-1)
        self.b_flat = self.b.reshape(-1)
        self._cheap: Dict[int, Interval] = {}
        self._screened: Dict[int, Interval] = {}
        self._exact: Dict[int, float] = {}

    # -- stage 1 -----------------------------------------------------------

    def _block_bound(self, K: int) -> float:
        """Total variation after pooling blocks whose cells are all within K of each other."""
        if K < 0:
            return 1.0
        n, d = self.geometry.n, self.geometry.d
        s = 1
        while n % (2 * s) == 0 and d * (2 * s - 1) ** 2 <= K:
            s *= 2
        pooled_a = torus.pool(self.a, n // s)
        pooled_b = torus.pool(self.b, n // s)
        return 0.5 * float(np.abs(pooled_a - pooled_b).sum())

    def _level_bound(self, K: int) -> float:
        """max over level sets A of mass(A) minus the other measure's mass within K of A."""
        footprint = ball_footprint(self.geometry.n, self.geometry.d, K)
        if footprint is None:
            return 0.0
        best = 0.0
        for x, y in ((self.a, self.b), (self.b, self.a)):
            sets = list(level_sets(x))
            sets.append(x > y)
            for mask in sets:
                if not mask.any():
                    continue
                grown = dilate(mask, footprint)
                best = max(best, float(x[mask].sum() - y[grown].sum()))
        return best

    def cheap_bounds(self, K: int) -> Interval:
        if K not in self._cheap:
            self._cheap[K] = (max(0.0, self._level_bound(K)), min(1.0, self._block_bound(K)))
        return self._cheap[K]

    # -- stage 2 -----------------------------------------------------------

    def screened_bounds(self, K: int) -> Interval:
        """
        Interval from an integer max-flow on floored capacities.

        With f' the integer deficit, na and nb the supported cells of each
        side: (f' - nb) / S <= f <= (f' + na) / S.
        """
        if K in self._screened:
            return self._screened[K]
        C = self.geometry.cell_count
        ca = np.floor(self.a_flat * FLOW_SCALE).astype(np.int64)
        cb = np.floor(self.b_flat * FLOW_SCALE).astype(np.int64)
        na = int(np.count_nonzero(self.a_flat > 0))
        nb = int(np.count_nonzero(self.b_flat > 0))

        src, dst = cell_edges(self.geometry.n, self.geometry.d, K)
        keep = (ca[src] > 0) & (cb[dst] > 0)
        src, dst = src[keep], dst[keep]
        a_cells = np.flatnonzero(ca > 0)
        b_cells = np.flatnonzero(cb > 0)

        supplied = int(ca.sum())
        flow = 0
        if src.size:
            sink = 2 * C + 1
            rows = np.concatenate([np.zeros(a_cells.size, dtype=np.int64), 1 + src, 1 + C + b_cells])
            cols = np.concatenate([1 + a_cells, 1 + C + dst, np.full(b_cells.size, sink, dtype=np.int64)])
            data = np.concatenate([ca[a_cells], np.full(src.size, UNBOUNDED, dtype=np.int64), cb[b_cells]])
            graph = sparse.csr_matrix((data.astype(np.int32), (rows, cols)), shape=(sink + 1, sink + 1))
            graph.sort_indices()
            flow = int(maximum_flow(graph, 0, sink, method="dinic").flow_value)

        unmatched = supplied - flow
        interval = (max(0.0, (unmatched - nb) / FLOW_SCALE), min(1.0, (unmatched + na) / FLOW_SCALE))
        self._screened[K] = interval
        return interval

    # -- stage 3 -----------------------------------------------------------

    def exact_deficit(self, K: int) -> float:
        """Unmatched mass read off the minimum cut, summed exactly."""
        if K in self._exact:
            return self._exact[K]
        a_cells = np.flatnonzero(self.a_flat > 0)
        b_cells = np.flatnonzero(self.b_flat > 0)
        if not a_cells.size or not b_cells.size:
            value = 1.0 if (a_cells.size or b_cells.size) else 0.0
            self._exact[K] = value
            return value

        src, dst = cell_edges(self.geometry.n, self.geometry.d, K)
        keep = (self.a_flat[src] > 0) & (self.b_flat[dst] > 0)
        graph = nx.DiGraph()
        graph.add_node(SOURCE)
        graph.add_node(SINK)
        for i in a_cells:
            graph.add_edge(SOURCE, ("a", int(i)), capacity=float(self.a_flat[i]))
        for j in b_cells:
            graph.add_edge(("b", int(j)), SINK, capacity=float(self.b_flat[j]))
        graph.add_edges_from((("a", int(i)), ("b", int(j))) for i, j in zip(src[keep], dst[keep]))

        _, (reachable, _) = nx.minimum_cut(graph, SOURCE, SINK, flow_func=shortest_augmenting_path)
        pieces = [float(self.a_flat[node[1]]) for node in reachable if node != SOURCE and node[0] == "a"]
        pieces += [-float(self.b_flat[node[1]]) for node in reachable if node != SOURCE and node[0] == "b"]
        value = max(0.0, math.fsum(pieces))
        self._exact[K] = value
        logger.debug(f"Exact cut at K={K}: {int(keep.sum())} edges, deficit {value!r}")
        return value

    # -- queries -----------------------------------------------------------

    def below(self, K: int, threshold: float) -> bool:
        """Whether f(K) < threshold."""
        for stage in (self.cheap_bounds, self.screened_bounds):
            verdict = _settled(stage(K), threshold)
            if verdict is not None:
                return verdict
        return self.exact_deficit(K) < threshold

    def at_most(self, K: int, threshold: float) -> bool:
        """Whether f(K) <= threshold."""
        for stage in (self.cheap_bounds, self.screened_bounds):
            verdict = _settled(stage(K), threshold)
            if verdict is not None:
                return verdict
        return self.exact_deficit(K) <= threshold

    def at_least_certified(self, K: int, threshold: float) -> bool:
        """Whether some stage certifies f(K) > threshold without an exact cut."""
        for stage in (self.cheap_bounds, self.screened_bounds):
            if stage(K)[0] > threshold + MARGIN:
                return True
        return False

    def interval(self, K: int, tol: float) -> Interval:
        """
        Interval of width <= tol around f(K), from the integer flow when it is
        tight enough, else the exact cut.

        Only order-independent stages feed reported values, so the interval
        is the same for every translate of the pair.
        """
        if K in self._exact:
            value = self._exact[K]
            return value, value
        lo, hi = self.screened_bounds(K)
        if hi - lo <= tol:
            return lo, hi
        value = self.exact_deficit(K)
        return value, value


def shifted_lower_bounds(a: np.ndarray, b: np.ndarray, K: int) -> Optional[np.ndarray]:
    """
    Lower bounds on f(K) between a and every roll of b, indexed by the roll.

    Entry s bounds the deficit between a and np.roll(b, s): for a level set A
    of a, the rolled b can cover A only with its mass inside A dilated by K,
    and that mass is a circular cross-correlation. None once the ball wraps
    the torus.
    """
    n, d = a.shape[0], a.ndim
    footprint = ball_footprint(n, d, K)
    if footprint is None:
        return None
    spectrum = np.conj(fft.rfftn(b))
    best = np.zeros(b.shape)
    for mask in level_sets(a):
        grown = dilate(mask, footprint)
        covered = fft.irfftn(fft.rfftn(grown.astype(float)) * spectrum, s=b.shape)
        best = np.maximum(best, float(a[mask].sum()) - covered)
    return best


def levels_below(geometry: TorusGeometry, limit: float) -> List[Tuple[int, float]]:
    """(K, length) for every distinct offset norm of length <= limit, ascending."""
    found = []
    for K in distance_levels(geometry.n, geometry.d):
        length = geometry.h * math.sqrt(int(K))
        if length > limit:
            break
        found.append((int(K), length))
    return found


def largest_level(geometry: TorusGeometry, radius: float, strict: bool) -> int:
    """Largest K whose length is < radius (strict) or <= radius; -1 when there is none."""
    chosen = -1
    for K in distance_levels(geometry.n, geometry.d):
        length = geometry.h * math.sqrt(int(K))
        if length > radius or (strict and length == radius):
            break
        chosen = int(K)
    return chosen
