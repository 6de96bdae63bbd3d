"""
Prokhorov distance between finite measures on the torus.

Both measures are normalized to unit total. By Strassen's duality
d_P(mu, nu) <= eps iff a coupling leaves at most eps of the mass unmatched
over pairs at torus distance <= eps. The unmatched mass f(eps) is a max-flow
deficit on the bipartite graph of support sites; it only changes at pairwise
site distances, so d_P = min_k max(D_k, f(D_k)) over the sorted candidate
distances D_k, found by bisection. Pairs of cell measures use the grid
oracle in services.cell_flow instead of the dense site graph.
"""

import csv
import logging
import math
from fractions import Fraction
from typing import Dict, List, NamedTuple, Optional, Tuple

import networkx as nx
import numpy as np
from networkx.algorithms.flow import shortest_augmenting_path

from config import settings
from errors import ShellUnresolvableError, TotalMassMismatchError
from models import GridVector, Measure, ProkhorovBracket, Shell, TorusGeometry
from services.cell_flow import CellFlow, levels_below, unit_grid
from services.measure_validator import MeasureValidator
from services import torus

logger = logging.getLogger(__name__)

SOURCE = "s"
SINK = "t"


class Sites(NamedTuple):
    """Support sites of a measure: coordinates (fine-lattice ints or floats) and unit-normalized masses."""
    coords: np.ndarray
    masses: List[float]
    exact: bool


def support_sites(mu: Measure, exact: bool = True) -> Sites:
    """
    Cell centers with positive mass plus atoms, merged by position.

    Coordinates are integers on the fine lattice when every atom lies on the
    sub-grid; otherwise floats in length units.
    """
    geometry = mu.geometry
    total = torus.total_mass(mu)
    cell_coords = torus.cell_fine_coordinates(geometry)
    atom_coords = torus.fine_coordinates([a.position for a in mu.atoms], geometry) if exact else None
    use_ints = exact and atom_coords is not None and torus.fine_overflow_safe(geometry)

    merged: Dict[tuple, List[float]] = {}
    for index, m in enumerate(mu.cell_mass):
        if m > 0:
            key = tuple(int(x) for x in cell_coords[index]) if use_ints else geometry.cell_center(index)
            merged.setdefault(key, []).append(m)
    for i, atom in enumerate(mu.atoms):
        key = tuple(int(x) for x in atom_coords[i]) if use_ints else atom.position
        merged.setdefault(key, []).append(atom.mass)

    keys = sorted(merged)
    masses = [math.fsum(merged[k]) / total for k in keys] if total > 0 else []
    dtype = np.int64 if use_ints else float
    coords = np.asarray(keys, dtype=dtype).reshape(len(keys), geometry.d)
    return Sites(coords=coords, masses=masses, exact=use_ints)


def _pair_keys(a: Sites, b: Sites, geometry: TorusGeometry) -> Tuple[np.ndarray, float]:
    """
    Matrix of distance keys between the two site sets and the length of one key unit.

    Exact sites give integer squared distances in fine units; otherwise the
    keys are squared lengths.
    """
    if a.exact and b.exact:
        period = torus.fine_period(geometry)
        delta = torus.wrapped_fine_delta(a.coords[:, None, :], b.coords[None, :, :], period)
        return np.sum(delta * delta, axis=2), torus.fine_unit(geometry)
    L = geometry.L
    delta = np.abs(a.coords.astype(float)[:, None, :] - b.coords.astype(float)[None, :, :]) % L
    delta = np.minimum(delta, L - delta)
    return np.sum(delta * delta, axis=2), 1.0


class StrassenProblem:
    """
    Feasibility oracle for d_P(mu, nu) <= eps between two measures on the same torus.

    Candidate distances are the distinct site distances up to 1, with 0 in
    front and a sentinel known to be feasible at the end: 1, or cap when the
    caller knows d_P <= cap. Pairs of pure cell measures are solved on the
    grid by CellFlow; any atom switches to the site graph.
    """

    def __init__(self, mu: Measure, nu: Measure, cap: Optional[float] = None):
        self.geometry = mu.geometry
        limit = 1.0 if cap is None else min(1.0, cap)
        self.cells: Optional[CellFlow] = None
        if mu.is_diffuse and nu.is_diffuse:
            self.cells = CellFlow(self.geometry, unit_grid(mu), unit_grid(nu))
            lengths = levels_below(self.geometry, limit)
        else:
            lengths = self._init_sites(mu, nu, limit)
        if cap is not None and cap <= 1.0:
            lengths = [(key, length) for key, length in lengths if length < cap]
        if not lengths or lengths[0][1] > 0.0:
            lengths.insert(0, (-1, 0.0))
        if lengths[-1][1] < limit:
            lengths.append((None, limit))
        self.candidates = lengths
        self._deficits: Dict[int, float] = {}
        self._trace: List[Tuple[float, str, bool]] = []

    def _init_sites(self, mu: Measure, nu: Measure, limit: float) -> List[Tuple[int, float]]:
        exact = not (mu.approximate or nu.approximate)
        self.a = support_sites(mu, exact)
        self.b = support_sites(nu, exact)
        if self.a.exact != self.b.exact:
            self.a = support_sites(mu, exact=False)
            self.b = support_sites(nu, exact=False)
        self.keys, unit = _pair_keys(self.a, self.b, self.geometry)

        lengths = []
        if self.keys.size:
            for key in np.unique(self.keys):
                length = unit * math.sqrt(float(key)) if self.a.exact else math.sqrt(float(key))
                if length > limit:
                    break
                lengths.append((key, length))
        return lengths

    @property
    def distances(self) -> List[float]:
        return [length for _, length in self.candidates]

    def deficit(self, k: int) -> float:
        """Unmatched mass f(D_k) of an optimal coupling restricted to pairs at distance <= D_k."""
        if k in self._deficits:
            return self._deficits[k]
        threshold, length = self.candidates[k]
        if self.cells is not None:
            value = self.cells.exact_deficit(threshold) if threshold is not None else 0.0
            self._deficits[k] = value
            self._trace.append((length, repr(value), value <= length))
            return value

        graph = nx.DiGraph()
        graph.add_node(SOURCE)
        graph.add_node(SINK)
        for i, m in enumerate(self.a.masses):
            graph.add_edge(SOURCE, ("a", i), capacity=m)
        for j, m in enumerate(self.b.masses):
            graph.add_edge(("b", j), SINK, capacity=m)
        # the sentinel (threshold None) connects every pair
        mask = np.ones(self.keys.shape, dtype=bool) if threshold is None else self.keys <= threshold
        rows, cols = np.nonzero(mask)
        graph.add_edges_from((("a", int(i)), ("b", int(j))) for i, j in zip(rows, cols))

        if self.a.masses and self.b.masses:
            _, (reachable, _) = nx.minimum_cut(graph, SOURCE, SINK, flow_func=shortest_augmenting_path)
            pieces = [self.a.masses[node[1]] for node in reachable if node != SOURCE and node[0] == "a"]
            pieces += [-self.b.masses[node[1]] for node in reachable if node != SOURCE and node[0] == "b"]
            value = max(0.0, math.fsum(pieces))
        else:
            value = 1.0 if (self.a.masses or self.b.masses) else 0.0

        self._deficits[k] = value
        self._trace.append((length, repr(value), value <= length))
        return value

    def _deficit_interval(self, k: int, tol: float) -> Tuple[float, float]:
        threshold = self.candidates[k][0]
        if threshold is None:
            return 0.0, 0.0
        if self.cells is not None:
            return self.cells.interval(threshold, tol)
        value = self.deficit(k)
        return value, value

    def feasible(self, k: int) -> bool:
        threshold, length = self.candidates[k]
        if threshold is None:
            return True
        if self.cells is not None:
            ok = self.cells.at_most(threshold, length)
            self._trace.append((length, "screened", ok))
            return ok
        return self.deficit(k) <= length

    def bracket(self, tol: float = 0.0) -> ProkhorovBracket:
        """Bisection over the candidate distances until the bracket is exact or narrower than tol."""
        D = self.distances
        if self.feasible(0):
            unmatched = self._deficit_interval(0, tol)[1]
            return ProkhorovBracket(lower=0.0, upper=0.0, witness_flow={"epsilon": 0.0, "unmatched": unmatched})

        lo, hi = 0, len(D) - 1
        while hi - lo > 1 and D[hi] - D[lo] > tol:
            mid = (lo + hi) // 2
            if self.feasible(mid):
                hi = mid
            else:
                lo = mid

        # f(D_lo) only matters up to the next candidate
        target = D[hi] if hi == lo + 1 else D[lo + 1]
        if self.cells is not None and self.cells.at_least_certified(self.candidates[lo][0], target):
            f_low = f_high = target
        else:
            f_low, f_high = self._deficit_interval(lo, tol)
        if hi == lo + 1:
            lower, upper = min(D[hi], f_low), min(D[hi], f_high)
        else:
            lower, upper = min(f_low, D[lo + 1]), D[hi]
        unmatched = self._deficit_interval(hi, tol)[1]
        self._dump_trace()
        return ProkhorovBracket(
            lower=lower,
            upper=upper,
            witness_flow={"epsilon": D[hi], "unmatched": unmatched, "candidates": float(len(D))},
        )

    def strictly_below(self, radius: float) -> bool:
        """Whether d_P < radius, from the single flow at the largest candidate below radius."""
        if radius <= 0:
            return False
        if radius > self.candidates[-1][1]:
            return True
        D = self.distances
        k = max(i for i, length in enumerate(D) if length < radius)
        threshold = self.candidates[k][0]
        if threshold is None:
            return True
        if self.cells is not None:
            return self.cells.below(threshold, radius)
        return self.deficit(k) < radius

    def exceeds(self, value: float) -> bool:
        """Whether d_P > value, decided by the flow at the largest candidate <= value."""
        if value < 0:
            return True
        D = self.distances
        k = max(i for i, length in enumerate(D) if length <= value)
        threshold = self.candidates[k][0]
        if threshold is None:
            return False
        if self.cells is not None:
            return not self.cells.at_most(threshold, value)
        return self.deficit(k) > value

    def _dump_trace(self) -> None:
        if not (settings.debug and settings.prokhorov_trace_path):
            return
        with open(settings.prokhorov_trace_path, "a", newline="") as handle:
            writer = csv.writer(handle)
            for length, value, ok in self._trace:
                writer.writerow([repr(length), value, int(ok)])


def _check_pair(mu: Measure, nu: Measure, rel_tol: Optional[float]) -> Tuple[float, float]:
    MeasureValidator.validate_and_raise(mu, nu, rel_tol=rel_tol)
    ta, tb = torus.total_mass(mu), torus.total_mass(nu)
    if (ta == 0.0) != (tb == 0.0):
        raise TotalMassMismatchError(f"cannot normalize: totals {ta!r} and {tb!r}")
    return ta, tb


def prokhorov(mu: Measure, nu: Measure, tol: float = 1e-12, total_rel_tol: Optional[float] = 1e-12) -> ProkhorovBracket:
    """
    Certified bracket on the Prokhorov distance of the unit-normalized measures.

    Args:
        mu, nu: Measures on the same torus
        tol: Stop bisecting once the candidate interval is narrower than this;
            the bracket is exact when the candidates are exhausted first
        total_rel_tol: Required agreement of the totals; None skips the check

    Raises:
        GeometryMismatchError, TotalMassMismatchError
    """
    ta, _ = _check_pair(mu, nu, total_rel_tol)
    if ta == 0.0:
        return ProkhorovBracket(lower=0.0, upper=0.0)
    return StrassenProblem(mu, nu).bracket(tol)


def ball_contains(center: Measure, radius: float, other: Measure) -> bool:
    """True iff d_P(center, other) < radius (open ball)."""
    ta, _ = _check_pair(center, other, None)
    if radius <= 0:
        return False
    if ta == 0.0:
        return True
    return StrassenProblem(center, other).strictly_below(radius)


def shell_vectors(geometry: TorusGeometry, shell: Shell) -> List[GridVector]:
    """Grid vectors t with 1/N <= |t| <= 2/N, compared exactly, in canonical order."""
    h = Fraction(geometry.L) / geometry.n
    low, high = Fraction(1, shell.N ** 2), Fraction(4, shell.N ** 2)
    found = []
    for k in torus.all_grid_vectors(geometry):
        sq = torus.index_norm_sq(k, geometry.n)
        if sq and low <= sq * h * h <= high:
            found.append(k)
    return found


def is_resolvable(geometry: TorusGeometry, shell: Shell) -> bool:
    return bool(shell_vectors(geometry, shell))


class ShellScan(NamedTuple):
    distance: float
    shift: GridVector
    evaluated: int


def shell_scan(mu: Measure, shell: Shell, tol: Optional[float] = None) -> ShellScan:
    """
    Minimum of d_P(mu, mu + t) over grid vectors t in the shell, with the minimizing t.

    Only one of each +-t pair is evaluated: d_P(mu, mu + t) = d_P(mu, mu - t).
    Shifts are visited by increasing length and d_P(mu, mu + t) <= |t| caps
    every search. A shift already certified above the best upper bound plus
    tol is skipped. The reported distance is the least lower bound, so it is
    within tol below the true minimum.
    """
    geometry = mu.geometry
    vectors = shell_vectors(geometry, shell)
    if not vectors:
        raise ShellUnresolvableError(f"no grid vector of spacing h={geometry.h} in shell [{shell.inner}, {shell.outer}]")
    tol = settings.prokhorov_tol if tol is None else tol

    seen = set()
    shifts: List[GridVector] = []
    for k in vectors:
        negated = tuple((-x) % geometry.n for x in k)
        if negated in seen:
            continue
        seen.add(k)
        shifts.append(k)
    shifts.sort(key=lambda k: torus.index_norm_sq(k, geometry.n))
    if torus.total_mass(mu) == 0.0:
        return ShellScan(distance=0.0, shift=shifts[0], evaluated=0)

    best: Optional[Tuple[float, GridVector]] = None
    best_upper = math.inf
    evaluated = 0
    for k in shifts:
        problem = StrassenProblem(mu, torus.translate_by_index(mu, k), cap=torus.index_norm(k, geometry))
        if best is not None and problem.exceeds(best_upper + tol):
            continue
        evaluated += 1
        bracket = problem.bracket(tol)
        best_upper = min(best_upper, bracket.upper)
        if best is None or bracket.lower < best[0]:
            best = (bracket.lower, k)
        if bracket.upper == 0.0:
            break
    logger.debug(f"Shell N={shell.N}: {evaluated} of {len(shifts)} translates bracketed, minimum {best[0]!r} at {best[1]}")
    return ShellScan(distance=best[0], shift=best[1], evaluated=evaluated)


def theta_shell_distance(mu: Measure, shell: Shell) -> float:
    """Distance from mu to its translates by shell vectors."""
    return shell_scan(mu, shell).distance
