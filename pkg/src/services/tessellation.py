"""
Fair tessellations and local matching.

fair_tessellation allocates the mass of a measure to the points of a pattern
with equal capacities by the stable (Gale-Shapley) rule: pairs are served
nearest-first, ties broken by the wrapped displacement so the result is
translation-equivariant. within_cell_match pairs two equal-mass measures by
cumulative mass along a Hilbert traversal anchored at a point.
"""

import logging
import math
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from hilbertcurve.hilbertcurve import HilbertCurve

from errors import EmptyPatternError, MassMismatchError, NotDiffuseError
from models import (
    AllocationCase,
    AllocationEntry,
    AllocationMap,
    GridVector,
    Measure,
    PointPattern,
    TargetKind,
    TorusGeometry,
    Vector,
)
from services import torus

logger = logging.getLogger(__name__)

Target = Tuple[TargetKind, int]


class SiteTable(NamedTuple):
    """Sources of a measure (positive cells, then atoms) with coordinates for distance computations."""
    kinds: List[TargetKind]
    ids: List[int]
    masses: List[float]
    coords: np.ndarray
    cells: List[GridVector]
    exact: bool


def point_grid_index(point: Vector, geometry: TorusGeometry) -> Optional[GridVector]:
    """Grid index of a point lying on the grid, else None."""
    k = []
    for x in point:
        i = round(x / geometry.h)
        if i * geometry.h != x:
            return None
        k.append(i % geometry.n)
    return tuple(k)


def _point_coordinates(pattern: PointPattern, exact: bool) -> Tuple[np.ndarray, bool]:
    geometry = pattern.geometry
    if exact:
        rows = []
        for p in pattern.points:
            k = point_grid_index(p, geometry)
            if k is None:
                break
            rows.append(torus.grid_point_fine(k, geometry))
        else:
            return np.asarray(rows, dtype=np.int64).reshape(len(rows), geometry.d), True
        fine = torus.fine_coordinates(pattern.points, geometry)
        if fine is not None:
            return fine, True
    return np.asarray(pattern.points, dtype=float).reshape(len(pattern), geometry.d), False


def site_table(mu: Measure, exact: bool = True) -> SiteTable:
    geometry = mu.geometry
    atom_fine = torus.fine_coordinates([a.position for a in mu.atoms], geometry) if exact else None
    use_ints = exact and atom_fine is not None and torus.fine_overflow_safe(geometry)
    cell_fine = torus.cell_fine_coordinates(geometry)

    kinds, ids, masses, coords, cells = [], [], [], [], []
    for index, m in enumerate(mu.cell_mass):
        if m > 0:
            kinds.append(TargetKind.CELL)
            ids.append(index)
            masses.append(m)
            coords.append(tuple(cell_fine[index]) if use_ints else geometry.cell_center(index))
            cells.append(geometry.cell_multi_index(index))
    for i, atom in enumerate(mu.atoms):
        kinds.append(TargetKind.ATOM)
        ids.append(i)
        masses.append(atom.mass)
        coords.append(tuple(atom_fine[i]) if use_ints else atom.position)
        cells.append(torus.atom_cell(atom, geometry))
    dtype = np.int64 if use_ints else float
    array = np.asarray(coords, dtype=dtype).reshape(len(coords), geometry.d)
    return SiteTable(kinds, ids, masses, array, cells, use_ints)


def _wrapped_delta(src: np.ndarray, dst: np.ndarray, geometry: TorusGeometry, exact: bool) -> np.ndarray:
    if exact:
        return torus.wrapped_fine_delta(src[:, None, :], dst[None, :, :], torus.fine_period(geometry))
    L = geometry.L
    delta = np.mod(dst[None, :, :] - src[:, None, :], L)
    return np.where(delta > L / 2, delta - L, delta)


def preference_order(src: np.ndarray, dst: np.ndarray, geometry: TorusGeometry, exact: bool) -> np.ndarray:
    """
    Flat indices s * |dst| + p of all (source, point) pairs, nearest first.

    Ties are broken by the displacement dst - src, then by indices.
    """
    delta = _wrapped_delta(src, dst, geometry, exact)
    sq = np.sum(delta * delta, axis=2)
    S, P = sq.shape
    s_idx, p_idx = np.meshgrid(np.arange(S), np.arange(P), indexing="ij")
    keys = [p_idx.ravel(), s_idx.ravel()]
    keys += [delta[:, :, c].ravel() for c in reversed(range(geometry.d))]
    keys.append(sq.ravel())
    return np.lexsort(keys)


def stable_assignment(mu: Measure, pattern: PointPattern) -> Tuple[SiteTable, List[List[Tuple[int, float]]]]:
    """
    Stable allocation of every source site of mu to the points, capacity total/|P| each.

    Returns:
        The site table and, per site, the (point index, mass) pieces in the order assigned
    """
    if len(pattern) == 0:
        raise EmptyPatternError("fair tessellation needs at least one point")
    geometry = mu.geometry
    sites = site_table(mu)
    points, points_exact = _point_coordinates(pattern, sites.exact)
    exact = sites.exact and points_exact
    if sites.exact and not exact:
        sites = site_table(mu, exact=False)

    rows: List[List[Tuple[int, float]]] = [[] for _ in sites.masses]
    if not sites.masses:
        return sites, rows

    total = math.fsum(sites.masses)
    P = len(pattern)
    capacity = [total / P] * P
    remaining = list(sites.masses)
    open_sources = len(remaining)

    for flat in preference_order(sites.coords, points, geometry, exact):
        s, p = divmod(int(flat), P)
        if remaining[s] <= 0 or capacity[p] <= 0:
            continue
        amount = min(remaining[s], capacity[p])
        rows[s].append((p, amount))
        remaining[s] -= amount
        capacity[p] -= amount
        if remaining[s] <= 0:
            open_sources -= 1
            if open_sources == 0:
                break

    # rounding leftovers go to the source's first choice
    for s, rest in enumerate(remaining):
        if rest > 0:
            if rows[s]:
                p, m = rows[s][0]
                rows[s][0] = (p, m + rest)
            else:
                delta = _wrapped_delta(sites.coords[s:s + 1], points, geometry, exact)
                nearest = int(np.argmin(np.sum(delta * delta, axis=2)[0]))
                rows[s].append((nearest, rest))
    return sites, rows


def fair_tessellation(mu: Measure, pattern: PointPattern) -> AllocationMap:
    """
    Equal-capacity stable allocation of mu to the points of a pattern.

    Args:
        mu: Measure to tessellate (atoms allowed; their rows go to atom_entries)
        pattern: Nonempty point pattern on the same torus

    Returns:
        AllocationMap with POINT targets indexed by the pattern's point order

    Raises:
        EmptyPatternError: if the pattern is empty
    """
    sites, rows = stable_assignment(mu, pattern)
    cell_rows: List[Tuple[AllocationEntry, ...]] = [()] * mu.geometry.cell_count
    atom_rows: List[Tuple[AllocationEntry, ...]] = [()] * len(mu.atoms)
    for kind, ident, pieces in zip(sites.kinds, sites.ids, rows):
        row = tuple(AllocationEntry(kind=TargetKind.POINT, target=p, mass=m) for p, m in pieces)
        if kind == TargetKind.CELL:
            cell_rows[ident] = row
        else:
            atom_rows[ident] = row
    entries = tuple(cell_rows)
    return AllocationMap(
        geometry=mu.geometry,
        entries=entries,
        atom_entries=tuple(atom_rows),
        monge_defect=AllocationMap.defect_of(entries),
        case=AllocationCase.TESSELLATION,
        pattern=pattern,
    )


def traversal_keys(cells: Sequence[GridVector], anchor: GridVector, n: int) -> List[int]:
    """Position of each cell along the Hilbert curve in anchor-relative coordinates (arc order in 1D)."""
    if not cells:
        return []
    rel = (np.asarray(cells, dtype=np.int64) - np.asarray(anchor, dtype=np.int64)) % n
    d = rel.shape[1]
    if d == 1:
        return [int(x) for x in rel[:, 0]]
    order = max(1, math.ceil(math.log2(n)))
    curve = HilbertCurve(order, d)
    return [int(x) for x in curve.distances_from_points(rel.tolist())]


def monotone_match(
    sources: Sequence[Tuple[object, float]],
    targets: Sequence[Tuple[object, float]],
    rel_tol: float = 1e-9,
) -> List[Tuple[object, object, float]]:
    """
    Match cumulative source mass to cumulative target mass, both already in traversal order.

    Raises:
        MassMismatchError: if the totals differ by more than rel_tol
    """
    s_total = math.fsum(m for _, m in sources)
    t_total = math.fsum(m for _, m in targets)
    if not math.isclose(s_total, t_total, rel_tol=rel_tol, abs_tol=1e-300):
        raise MassMismatchError(f"local masses differ: {s_total!r} vs {t_total!r}")

    matched: List[Tuple[object, object, float]] = []
    i = j = 0
    rs = sources[0][1] if sources else 0.0
    rt = targets[0][1] if targets else 0.0
    while i < len(sources) and j < len(targets):
        if rs <= rt:
            if rs > 0:
                matched.append((sources[i][0], targets[j][0], rs))
            rt -= rs
            i += 1
            rs = sources[i][1] if i < len(sources) else 0.0
        else:
            if rt > 0:
                matched.append((sources[i][0], targets[j][0], rt))
            rs -= rt
            j += 1
            rt = targets[j][1] if j < len(targets) else 0.0

    if i < len(sources) and targets:
        last = targets[-1][0]
        for k in range(i, len(sources)):
            rest = rs if k == i else sources[k][1]
            if rest > 0:
                matched.append((sources[k][0], last, rest))
    return matched


def _relative_fine(coords: np.ndarray, anchor: np.ndarray, geometry: TorusGeometry, exact: bool) -> List[tuple]:
    period = torus.fine_period(geometry) if exact else geometry.L
    rel = np.mod(coords - anchor, period)
    return [tuple(row.tolist()) for row in rel]


def traversal_order(
    sites: SiteTable,
    anchor: Vector,
    geometry: TorusGeometry,
    indices: Optional[Sequence[int]] = None,
) -> List[int]:
    """Site indices sorted along the traversal anchored at a point; atoms precede cell mass within a cell."""
    indices = list(range(len(sites.masses))) if indices is None else list(indices)
    anchor_cell, anchor_coord = anchor_coordinates(anchor, geometry, sites.exact)
    keys = traversal_keys([sites.cells[i] for i in indices], anchor_cell, geometry.n)
    rel = _relative_fine(sites.coords[indices], anchor_coord, geometry, sites.exact) if indices else []
    rank = [0 if sites.kinds[i] == TargetKind.ATOM else 1 for i in indices]
    order = sorted(range(len(indices)), key=lambda j: (keys[j], rank[j], rel[j]))
    return [indices[j] for j in order]


def anchor_coordinates(anchor: Vector, geometry: TorusGeometry, exact: bool) -> Tuple[GridVector, np.ndarray]:
    """Grid cell and distance coordinates of an anchor point."""
    k = point_grid_index(anchor, geometry)
    if k is None:
        k = tuple(min(int(x // geometry.h), geometry.n - 1) for x in anchor)
        fine = torus.fine_coordinates([anchor], geometry)
        coord = fine[0] if (exact and fine is not None) else np.asarray(anchor, dtype=float)
    else:
        coord = np.asarray(torus.grid_point_fine(k, geometry), dtype=np.int64) if exact else np.asarray(anchor, dtype=float)
    return k, coord


def within_cell_match(phi_cell: Measure, psi_cell: Measure, anchor: Vector) -> AllocationMap:
    """
    Monotone rearrangement of phi_cell onto psi_cell along the Hilbert traversal anchored at anchor.

    Raises:
        NotDiffuseError: if phi_cell has atoms
        MassMismatchError: if the totals differ
    """
    if phi_cell.atoms:
        raise NotDiffuseError("local match sources must be cells")
    geometry = phi_cell.geometry
    src = site_table(phi_cell)
    dst = site_table(psi_cell)
    src_order = traversal_order(src, anchor, geometry)
    dst_order = traversal_order(dst, anchor, geometry)
    matched = monotone_match(
        [(src.ids[i], src.masses[i]) for i in src_order],
        [((dst.kinds[i], dst.ids[i]), dst.masses[i]) for i in dst_order],
    )

    rows: Dict[int, List[AllocationEntry]] = {}
    for cell, (kind, ident), mass in matched:
        rows.setdefault(cell, []).append(AllocationEntry(kind=kind, target=ident, mass=mass))
    entries = tuple(tuple(rows.get(i, ())) for i in range(geometry.cell_count))
    return AllocationMap(
        geometry=geometry,
        entries=entries,
        monge_defect=AllocationMap.defect_of(entries),
        case=AllocationCase.LOCAL,
    )
