"""
Measure operations on the flat torus: translation action, total mass,
Minkowski projection along invariant axes, and quantization.

Grid translations are carried as integer index vectors so that the group
action is exact: cells are rolled, and atoms on the 2^-bits * L sub-grid are
moved with integer tick arithmetic.
"""

import itertools
import logging
import math
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from config import settings
from errors import (
    BadResolutionError,
    DimensionMismatchError,
    IncompatibleDirectionError,
    NonGridShiftError,
)
from models import Atom, GridVector, Measure, TorusGeometry, Vector

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Integer grid helpers
# ---------------------------------------------------------------------------

def tick_count() -> int:
    """Number of atom sub-grid ticks per side."""
    return 2 ** settings.atom_subgrid_bits


def position_from_ticks(tick: int, L: float) -> float:
    return tick * L / tick_count()


def ticks_of(x: float, L: float) -> Optional[int]:
    """Tick index of a coordinate, or None when it is not on the sub-grid."""
    T = tick_count()
    k = round(x * T / L)
    if position_from_ticks(k, L) == x:
        return k % T
    return None


def wrap_index(k: int, n: int) -> int:
    """Representative of k mod n in (-n/2, n/2]."""
    r = k % n
    return r - n if r > n // 2 else r


def wrap_vector(k: Sequence[int], n: int) -> GridVector:
    return tuple(wrap_index(int(x), n) for x in k)


def index_norm_sq(k: Sequence[int], n: int) -> int:
    """Squared torus norm of a grid vector, in units of h^2."""
    return sum(min(x % n, n - x % n) ** 2 for x in k)


def index_norm(k: Sequence[int], geometry: TorusGeometry) -> float:
    return geometry.h * math.sqrt(index_norm_sq(k, geometry.n))


def all_grid_vectors(geometry: TorusGeometry) -> List[GridVector]:
    return [tuple(k) for k in itertools.product(range(geometry.n), repeat=geometry.d)]


def grid_shift(t: Sequence[float], geometry: TorusGeometry) -> GridVector:
    """Convert a translation vector to grid indices; raises if it is off the grid."""
    if len(t) != geometry.d:
        raise DimensionMismatchError(f"shift {tuple(t)} has dimension {len(t)}, torus has {geometry.d}")
    k = []
    for x in t:
        steps = x / geometry.h
        nearest = round(steps)
        if abs(steps - nearest) > 1e-9:
            raise NonGridShiftError(f"shift component {x} is not a multiple of h={geometry.h}")
        k.append(int(nearest) % geometry.n)
    return tuple(k)


def torus_distance(x: Sequence[float], y: Sequence[float], L: float) -> float:
    total = 0.0
    for a, b in zip(x, y):
        delta = abs(a - b) % L
        delta = min(delta, L - delta)
        total += delta * delta
    return math.sqrt(total)


def fine_unit(geometry: TorusGeometry) -> float:
    """Length of the integer lattice shared by cell centers, grid points and atom ticks."""
    return geometry.L / (2 * geometry.n * tick_count())


def fine_period(geometry: TorusGeometry) -> int:
    return 2 * geometry.n * tick_count()


def fine_coordinates(positions: Iterable[Vector], geometry: TorusGeometry) -> Optional[np.ndarray]:
    """
    Integer coordinates on the fine lattice, or None when some position is
    off the atom sub-grid.
    """
    scale = 2 * geometry.n
    rows = []
    for p in positions:
        ticks = [ticks_of(x, geometry.L) for x in p]
        if any(t is None for t in ticks):
            return None
        rows.append([t * scale for t in ticks])
    if not rows:
        return np.zeros((0, geometry.d), dtype=np.int64)
    return np.asarray(rows, dtype=np.int64)


def cell_fine_coordinates(geometry: TorusGeometry) -> np.ndarray:
    """Fine-lattice coordinates of all cell centers, row-major."""
    T = tick_count()
    idx = np.indices(geometry.shape).reshape(geometry.d, -1).T
    return (2 * idx + 1).astype(np.int64) * T


def grid_point_fine(k: Sequence[int], geometry: TorusGeometry) -> Tuple[int, ...]:
    return tuple(int(x) * 2 * tick_count() for x in k)


def wrapped_fine_delta(a: np.ndarray, b: np.ndarray, period: int) -> np.ndarray:
    """Componentwise b - a wrapped to (-period/2, period/2]."""
    delta = np.mod(b - a, period)
    return np.where(delta > period // 2, delta - period, delta)


def fine_overflow_safe(geometry: TorusGeometry) -> bool:
    half = fine_period(geometry) // 2
    return geometry.d * half * half < 2 ** 62


def atom_cell(atom: Atom, geometry: TorusGeometry, resolution: Optional[int] = None) -> GridVector:
    """Grid cell containing an atom (at the given resolution, default n)."""
    r = resolution or geometry.n
    cell = []
    for x in atom.position:
        tick = ticks_of(x, geometry.L)
        if tick is not None:
            cell.append(tick * r // tick_count())
        else:
            cell.append(min(int(x // (geometry.L / r)), r - 1))
    return tuple(cell)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def total_mass(mu: Measure) -> float:
    """Sum of all cell and atom masses."""
    return math.fsum(list(mu.cell_mass) + [a.mass for a in mu.atoms])


def _wrap_coordinate(x: float, L: float) -> float:
    y = x % L
    return 0.0 if y >= L else y


def translate_atoms(atoms: Sequence[Atom], k: Sequence[int], geometry: TorusGeometry) -> Tuple[Atom, ...]:
    """Move atoms by the grid vector k."""
    T = tick_count()
    moved = []
    for atom in atoms:
        coords = []
        for x, step in zip(atom.position, k):
            tick = ticks_of(x, geometry.L)
            shift_ticks = step * T
            if tick is not None and shift_ticks % geometry.n == 0:
                coords.append(position_from_ticks((tick + shift_ticks // geometry.n) % T, geometry.L))
            else:
                coords.append(_wrap_coordinate(x + step * geometry.h, geometry.L))
        moved.append(Atom(position=tuple(coords), mass=atom.mass))
    return tuple(moved)


def translate_by_index(mu: Measure, k: Sequence[int]) -> Measure:
    """Exact translation by the grid vector k (in cell units)."""
    geometry = mu.geometry
    if len(k) != geometry.d:
        raise DimensionMismatchError(f"shift {tuple(k)} has dimension {len(k)}, torus has {geometry.d}")
    k = tuple(int(x) % geometry.n for x in k)
    if not any(k):
        return mu
    grid = np.roll(mu.grid(), shift=k, axis=tuple(range(geometry.d)))
    return Measure.from_grid(geometry, grid, translate_atoms(mu.atoms, k, geometry))


def translate(mu: Measure, t: Sequence[float], exact: bool = True) -> Measure:
    """
    Translate mu by the vector t: (mu + t)(A) = mu(A - t).

    Exact mode requires t on the grid. Approximate mode splits each cell
    multilinearly between the neighbouring cells and marks the result.
    """
    geometry = mu.geometry
    if len(t) != geometry.d:
        raise DimensionMismatchError(f"shift {tuple(t)} has dimension {len(t)}, torus has {geometry.d}")
    if exact:
        return translate_by_index(mu, grid_shift(t, geometry))

    steps = [x / geometry.h for x in t]
    base = [math.floor(s) for s in steps]
    frac = [s - b for s, b in zip(steps, base)]
    if not any(frac):
        return translate_by_index(mu, base)

    source = mu.grid()
    shifted = np.zeros_like(source)
    for corner in itertools.product((0, 1), repeat=geometry.d):
        weight = 1.0
        for c, f in zip(corner, frac):
            weight *= f if c else 1.0 - f
        if weight == 0.0:
            continue
        shift = tuple(b + c for b, c in zip(base, corner))
        shifted += weight * np.roll(source, shift=shift, axis=tuple(range(geometry.d)))
    atoms = tuple(
        Atom(position=tuple(_wrap_coordinate(x + s, geometry.L) for x, s in zip(a.position, t)), mass=a.mass)
        for a in mu.atoms
    )
    logger.debug(f"Approximate translation by {tuple(t)} (fractional steps {frac})")
    return Measure(
        geometry=geometry,
        cell_mass=tuple(shifted.reshape(-1).tolist()),
        atoms=atoms,
        approximate=True,
    )


def axes_of_basis(v_basis: Sequence[Vector], d: int) -> List[int]:
    """Coordinate axes spanned by an axis-aligned orthonormal basis."""
    axes = []
    for v in v_basis:
        if len(v) != d:
            raise DimensionMismatchError(f"basis vector {tuple(v)} has dimension {len(v)}, torus has {d}")
        v = np.asarray(v, dtype=float)
        axis = int(np.argmax(np.abs(v)))
        if abs(abs(v[axis]) - 1.0) > 1e-12 or np.max(np.abs(np.delete(v, axis)), initial=0.0) > 1e-12:
            raise IncompatibleDirectionError(f"direction {tuple(v)} is not axis-aligned; projection needs grid axes")
        if axis in axes:
            raise IncompatibleDirectionError(f"basis repeats axis {axis}")
        axes.append(axis)
    return sorted(axes)


def minkowski_project(mu: Measure, v_basis: Sequence[Vector], window_volume: float = 1.0) -> Measure:
    """
    Measure induced on the torus of W = V^perp: mu'(A) = mu(A + C) for a
    window C in V of the given volume.

    The measure is summed over the V axes and rescaled by
    window_volume / L^dim(V), so mu' coincides with mu(A + C) whenever mu is
    invariant along V.
    """
    geometry = mu.geometry
    v_axes = axes_of_basis(v_basis, geometry.d)
    if not v_axes:
        return mu
    if len(v_axes) == geometry.d:
        raise IncompatibleDirectionError("V is the whole space; there is no complement to project onto")
    w_axes = [a for a in range(geometry.d) if a not in v_axes]
    scale = window_volume / geometry.L ** len(v_axes)
    w_geometry = geometry.with_dimension(len(w_axes))

    projected = np.sum(mu.grid(), axis=tuple(v_axes)) * scale

    merged: Dict[Vector, List[float]] = {}
    for atom in mu.atoms:
        key = tuple(atom.position[a] for a in w_axes)
        merged.setdefault(key, []).append(atom.mass)
    atoms = tuple(Atom(position=pos, mass=math.fsum(masses) * scale) for pos, masses in merged.items())
    return Measure.from_grid(w_geometry, projected, atoms)


def pool(grid: np.ndarray, resolution: int) -> np.ndarray:
    """Sum an (n,)*d grid over blocks of n // resolution cells per axis."""
    n, d = grid.shape[0], grid.ndim
    f = n // resolution
    blocks = grid.reshape(sum(((resolution, f) for _ in range(d)), ()))
    return blocks.sum(axis=tuple(range(1, 2 * d, 2)))


def _floor_codes(values: np.ndarray, q: float) -> np.ndarray:
    """Largest c with c*q <= value, computed so that multiples of q are fixed points."""
    codes = np.floor(values / q)
    codes = np.where((codes + 1) * q <= values, codes + 1, codes)
    codes = np.where(codes * q > values, codes - 1, codes)
    return np.maximum(codes, 0).astype(np.int64)


def quantize_codes(mu: Measure, resolution: int, step: float) -> np.ndarray:
    """Integer mass codes of mu pooled to resolution r; atoms are pooled into their cells."""
    geometry = mu.geometry
    if resolution < 1 or geometry.n % resolution != 0:
        raise BadResolutionError(f"resolution {resolution} must be positive and divide n={geometry.n}")
    if not step > 0:
        raise BadResolutionError(f"mass step must be positive, got {step}")
    pooled = pool(mu.grid(), resolution)

    if mu.atoms:
        pieces: Dict[GridVector, List[float]] = {}
        for atom in mu.atoms:
            pieces.setdefault(atom_cell(atom, geometry, resolution), []).append(atom.mass)
        for cell, masses in pieces.items():
            pooled[cell] = pooled[cell] + math.fsum(masses)
    return _floor_codes(pooled, step)


def quantize(mu: Measure, resolution: int, step: float) -> Measure:
    """
    Pool cell (and atom) masses to resolution r and round them down to
    multiples of q. Idempotent.
    """
    codes = quantize_codes(mu, resolution, step)
    geometry = mu.geometry.with_resolution(resolution)
    return Measure.from_grid(geometry, codes.astype(float) * step)
