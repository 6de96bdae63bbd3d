"""
Translation symmetries of measures on the grid: the group H, its invariant
subspace V, the lattice gap and the shell index N.
"""

import logging
import math
from collections import deque
from fractions import Fraction
from typing import Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
from scipy import fft

from config import settings
from errors import GeometryMismatchError, HasInvariantDirectionError
from models import GridVector, Measure, Shell, SymmetryGroup, TorusGeometry, Vector
from services import torus

logger = logging.getLogger(__name__)


def symmetry_tolerance(mu: Measure, tol: Optional[float] = None) -> float:
    """Absolute per-cell tolerance; defaults to symmetry_rel_tol times the mean cell mass."""
    if tol is not None:
        return tol
    return settings.symmetry_rel_tol * math.fsum(mu.cell_mass) / mu.geometry.cell_count


def _atom_shift_candidates(mu: Measure) -> Optional[Set[GridVector]]:
    """Grid shifts moving the first atom onto an atom of equal mass; None when there are no atoms."""
    if not mu.atoms:
        return None
    geometry = mu.geometry
    first = mu.atoms[0]
    found = set()
    for atom in mu.atoms:
        if atom.mass != first.mass:
            continue
        k = []
        for a, b in zip(first.position, atom.position):
            steps = (b - a) / geometry.h
            if abs(steps - round(steps)) > 1e-9:
                break
            k.append(int(round(steps)) % geometry.n)
        else:
            found.add(tuple(k))
    return found


def _autocorrelation_candidates(grid: np.ndarray, tol: float) -> np.ndarray:
    """
    Boolean mask of shifts k with ||A - roll(A, k)||^2 = 2(R0 - Rk) small enough
    to possibly pass the max-norm test.
    """
    spectrum = fft.rfftn(grid)
    R = fft.irfftn(spectrum * np.conj(spectrum), s=grid.shape)
    R0 = float(R.reshape(-1)[0])
    slack = grid.size * tol * tol + 1e-9 * abs(R0) + 1e-300
    return 2.0 * (R0 - R) <= slack


def is_symmetry(mu: Measure, k: Sequence[int], tol: float) -> bool:
    """Exact test: cells agree within tol and atoms coincide under the shift."""
    geometry = mu.geometry
    grid = mu.grid()
    if grid.size and np.max(np.abs(grid - np.roll(grid, shift=tuple(k), axis=tuple(range(geometry.d))))) > tol:
        return False
    if mu.atoms:
        moved = tuple(sorted(torus.translate_atoms(mu.atoms, k, geometry), key=lambda a: (a.position, a.mass)))
        if moved != mu.atoms:
            return False
    return True


def span_subgroup(generators: Iterable[Sequence[int]], n: int, d: int) -> Set[GridVector]:
    """Subgroup of (Z/n)^d generated by the given vectors."""
    gens = [tuple(int(x) % n for x in g) for g in generators]
    zero = (0,) * d
    seen = {zero}
    queue = deque([zero])
    while queue:
        x = queue.popleft()
        for g in gens:
            y = tuple((a + b) % n for a, b in zip(x, g))
            if y not in seen:
                seen.add(y)
                queue.append(y)
    return seen


def _generator_order_key(k: GridVector, n: int) -> Tuple:
    wrapped = torus.wrap_vector(k, n)
    return (torus.index_norm_sq(k, n), tuple(-x for x in wrapped))


def reduce_generators(elements: Iterable[GridVector], geometry: TorusGeometry) -> List[GridVector]:
    """Shortest-vector-first sweep: keep a vector when it is not already in the span of those kept."""
    n, d = geometry.n, geometry.d
    ordered = sorted((k for k in elements if any(k)), key=lambda k: _generator_order_key(k, n))
    generators: List[GridVector] = []
    span = {(0,) * d}
    for k in ordered:
        if k in span:
            continue
        generators.append(k)
        span = span_subgroup(generators, n, d)
    return generators


def _is_closed(elements: Set[GridVector], generators: List[GridVector], geometry: TorusGeometry) -> bool:
    n = geometry.n
    for g in generators:
        for h in elements:
            if tuple((a + b) % n for a, b in zip(g, h)) not in elements:
                return False
    return span_subgroup(generators, n, geometry.d) == elements


def _direction_key(p: GridVector) -> Tuple:
    return (sum(x * x for x in p), tuple(-abs(x) for x in p), tuple(-x for x in p))


def invariant_generators(elements: Set[GridVector], geometry: TorusGeometry) -> List[GridVector]:
    """
    Primitive grid directions whose whole cycle {j p mod n} lies in H.

    Candidates are the wrapped nonzero elements of H with coprime components,
    signed so the first nonzero component is positive. Shortest first; a
    direction whose cycle is already in the span of those kept is skipped.
    """
    n, d = geometry.n, geometry.d
    candidates = set()
    for k in elements:
        p = torus.wrap_vector(k, n)
        if not any(p) or math.gcd(*p) != 1:
            continue
        if next(x for x in p if x) < 0:
            p = tuple(-x for x in p)
        candidates.add(p)

    kept: List[GridVector] = []
    span = {(0,) * d}
    for p in sorted(candidates, key=_direction_key):
        cycle = [tuple((j * x) % n for x in p) for j in range(1, n)]
        if not all(c in elements for c in cycle) or all(c in span for c in cycle):
            continue
        kept.append(p)
        if len(kept) >= d and np.linalg.matrix_rank(np.asarray(kept)) == d:
            break
        span = span_subgroup(kept, n, d)
    return kept


def orthonormalize(vectors: Sequence[Sequence[float]], threshold: float = 1e-10) -> Tuple[Vector, ...]:
    """Modified Gram-Schmidt (two passes), skipping dependent vectors."""
    basis: List[np.ndarray] = []
    for v in vectors:
        w = np.asarray(v, dtype=float)
        for _ in range(2):
            for b in basis:
                w = w - np.dot(b, w) * b
        norm = float(np.linalg.norm(w))
        if norm < threshold:
            continue
        basis.append(w / norm)
    return tuple(tuple(float(x) for x in b) for b in basis)


def _invariant_basis(elements: Set[GridVector], geometry: TorusGeometry) -> Tuple[Vector, ...]:
    return orthonormalize(invariant_generators(elements, geometry))


def _build_group(elements: Set[GridVector], geometry: TorusGeometry, tol: float) -> SymmetryGroup:
    generators = reduce_generators(elements, geometry)
    closed = _is_closed(elements, generators, geometry)
    if not closed:
        logger.warning(f"⚠️ Detected symmetry set of size {len(elements)} is not closed under addition at tol={tol!r}")
    basis = _invariant_basis(elements, geometry)

    nonzero = [k for k in elements if any(k)]
    if basis:
        gap = 0.0
    elif not nonzero:
        gap = math.inf
    else:
        gap = min(torus.index_norm(k, geometry) for k in nonzero)

    return SymmetryGroup(
        geometry=geometry,
        elements=tuple(sorted(elements)),
        generators=tuple(tuple(x * geometry.h for x in torus.wrap_vector(g, geometry.n)) for g in generators),
        generator_indices=tuple(generators),
        invariant_basis=basis,
        gap=gap,
        tolerance=tol,
        closed=closed,
    )


def symmetry_elements(mu: Measure, tol: float) -> Set[GridVector]:
    geometry = mu.geometry
    mask = _autocorrelation_candidates(mu.grid(), tol)
    candidates = [tuple(int(x) for x in k) for k in np.argwhere(mask)]
    atom_candidates = _atom_shift_candidates(mu)
    if atom_candidates is not None:
        candidates = [k for k in candidates if k in atom_candidates]
    elements = {k for k in candidates if is_symmetry(mu, k, tol)}
    elements.add((0,) * geometry.d)
    return elements


def symmetry_group(mu: Measure, tol: Optional[float] = None) -> SymmetryGroup:
    """
    Grid translations t with translate(mu, t) = mu at tolerance.

    Args:
        mu: Measure to scan
        tol: Absolute per-cell mass tolerance (default: symmetry_rel_tol x mean cell mass)

    Returns:
        SymmetryGroup with elements, reduced generators, invariant basis and gap
    """
    tol = symmetry_tolerance(mu, tol)
    elements = symmetry_elements(mu, tol)
    group = _build_group(elements, mu.geometry, tol)
    logger.info(f"Symmetry scan: |H|={group.order}, generators={list(group.generators)}, dim V={group.v_dimension}")
    return group


def joint_symmetry_group(phi: Measure, psi: Measure, tol: Optional[float] = None) -> SymmetryGroup:
    """Common symmetries of a pair of measures."""
    if phi.geometry != psi.geometry:
        raise GeometryMismatchError(f"measures live on different tori: {phi.geometry} vs {psi.geometry}")
    tol_phi = symmetry_tolerance(phi, tol)
    tol_psi = symmetry_tolerance(psi, tol)
    elements = symmetry_elements(phi, tol_phi) & symmetry_elements(psi, tol_psi)
    return _build_group(elements, phi.geometry, max(tol_phi, tol_psi))


def invariant_directions(mu: Measure, tol: Optional[float] = None) -> Tuple[Vector, ...]:
    """Orthonormal basis of the invariant subspace V (empty when there is no invariant direction)."""
    return symmetry_group(mu, tol).invariant_basis


def shell_index(group: SymmetryGroup) -> Shell:
    """
    Smallest N whose closed ball of radius 2/N meets H only in 0.

    Raises:
        HasInvariantDirectionError: when V is nontrivial
    """
    if group.invariant_basis:
        raise HasInvariantDirectionError(
            f"measure has {group.v_dimension} invariant direction(s); no shell index exists"
        )
    nonzero = [k for k in group.elements if any(k)]
    if not nonzero:
        return Shell(N=1)

    geometry = group.geometry
    h = Fraction(geometry.L) / geometry.n
    gap_sq = min(torus.index_norm_sq(k, geometry.n) for k in nonzero) * h * h

    N = max(1, math.floor(2.0 / group.gap) + 1)
    while Fraction(4, N * N) >= gap_sq:
        N += 1
    while N > 1 and Fraction(4, (N - 1) ** 2) < gap_sq:
        N -= 1
    return Shell(N=N)
