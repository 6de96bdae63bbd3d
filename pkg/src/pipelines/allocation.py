"""
Balancing allocation pipeline: a map at grid resolution pushing a diffuse
measure phi onto psi, built as a translation-equivariant function of the pair.

The case split is on the invariant subspace V of the pair:
    dim V = d      both measures are uniform; the identity balances them
    dim V = 0      extract an auxiliary point pattern from the pair, tessellate
                   both measures onto it, match inside each tessellation cell
    otherwise      project along V, balance in the complement, extend back
"""

import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import settings
from errors import (
    ChartMismatchError,
    DegenerateBasisError,
    EmptyPatternError,
    FiberAtomError,
    NotUniformError,
)
from models import (
    AllocationCase,
    AllocationEntry,
    AllocationMap,
    Atom,
    LinearChart,
    Measure,
    PointPattern,
    TargetKind,
    Vector,
)
from pipelines.extraction import extract_point_process
from services import torus
from services.measure_validator import validate_balance_inputs
from services.symmetry import joint_symmetry_group, orthonormalize, symmetry_tolerance
from services.tessellation import monotone_match, stable_assignment, traversal_order

logger = logging.getLogger(__name__)

Target = Tuple[TargetKind, int]


def encode_pair(phi: Measure, psi: Measure, weight: Optional[float] = None) -> Measure:
    """Single measure phi + c * psi whose symmetries are, generically, those of the pair."""
    c = settings.encoding_weight if weight is None else weight
    grid = phi.grid() + c * psi.grid()
    atoms = [Atom(position=a.position, mass=c * a.mass) for a in phi.atoms + psi.atoms]
    return Measure.from_grid(phi.geometry, grid, atoms)


def _finish_rows(phi: Measure, pieces: Dict[int, Dict[Target, List[float]]]) -> Tuple[Tuple[AllocationEntry, ...], ...]:
    """
    Merge pieces per (source, target) and make each row sum to the source mass:
    the largest entry absorbs the rounding remainder.
    """
    rows = []
    for index, mass in enumerate(phi.cell_mass):
        targets = pieces.get(index)
        if not targets or mass <= 0:
            rows.append(())
            continue
        merged = sorted(
            ((kind, target, math.fsum(values)) for (kind, target), values in targets.items()),
            key=lambda x: (x[0].value, x[1]),
        )
        largest = max(range(len(merged)), key=lambda i: merged[i][2])
        others = math.fsum(m for i, (_, _, m) in enumerate(merged) if i != largest)
        kind, target, _ = merged[largest]
        merged[largest] = (kind, target, max(0.0, mass - others))
        rows.append(tuple(AllocationEntry(kind=k, target=t, mass=m) for k, t, m in merged if m > 0))
    return tuple(rows)


def balance_with_auxiliary(phi: Measure, psi: Measure, pattern: PointPattern) -> AllocationMap:
    """
    Tessellate phi and psi onto the same points, then match within each tessellation cell.

    Args:
        phi: Diffuse source measure
        psi: Target measure (atoms allowed) with the same total
        pattern: Auxiliary point pattern

    Returns:
        AllocationMap with CELL/ATOM targets of psi

    Raises:
        NotDiffuseError, TotalMassMismatchError, EmptyPatternError
    """
    validate_balance_inputs(phi, psi)
    if len(pattern) == 0:
        raise EmptyPatternError("balancing needs a nonempty auxiliary pattern")
    geometry = phi.geometry

    phi_sites, phi_rows = stable_assignment(phi, pattern)
    psi_sites, psi_rows = stable_assignment(psi, pattern)

    def by_point(rows):
        grouped: Dict[int, Dict[int, float]] = {}
        for site, assigned in enumerate(rows):
            for p, mass in assigned:
                grouped.setdefault(p, {})[site] = mass
        return grouped

    phi_at = by_point(phi_rows)
    psi_at = by_point(psi_rows)
    rel_tol = 2.0 * settings.total_rel_tol + 1e-12

    pieces: Dict[int, Dict[Target, List[float]]] = {}
    for p, point in enumerate(pattern.points):
        src = phi_at.get(p, {})
        dst = psi_at.get(p, {})
        src_order = traversal_order(phi_sites, point, geometry, sorted(src))
        dst_order = traversal_order(psi_sites, point, geometry, sorted(dst))
        matched = monotone_match(
            [(phi_sites.ids[i], src[i]) for i in src_order],
            [((psi_sites.kinds[j], psi_sites.ids[j]), dst[j]) for j in dst_order],
            rel_tol=rel_tol,
        )
        for cell, target, mass in matched:
            pieces.setdefault(cell, {}).setdefault(target, []).append(mass)

    entries = _finish_rows(phi, pieces)
    defect = AllocationMap.defect_of(entries)
    logger.info(f"Auxiliary balance over {len(pattern)} point(s): Monge defect {defect:.4f}")
    return AllocationMap(
        geometry=geometry,
        entries=entries,
        monge_defect=defect,
        case=AllocationCase.AUXILIARY,
        pattern=pattern,
    )


def gram_schmidt_chart(v_basis: Sequence[Vector], d: Optional[int] = None) -> LinearChart:
    """
    Orthonormal basis of W = V^perp from the projections of e_1, ..., e_d onto W.

    Raises:
        DegenerateBasisError: if v_basis is not linearly independent
    """
    if d is None:
        if not v_basis:
            raise DegenerateBasisError("dimension is required when V = {0}")
        d = len(v_basis[0])
    V = np.asarray(v_basis, dtype=float).reshape(len(v_basis), d)
    if len(v_basis) and np.linalg.matrix_rank(V, tol=1e-10) < len(v_basis):
        raise DegenerateBasisError(f"invariant basis of {len(v_basis)} vectors is linearly dependent")

    Q = np.asarray(orthonormalize(V), dtype=float).reshape(-1, d)
    projector = np.eye(d) - Q.T @ Q
    projections = [projector @ e for e in np.eye(d)]
    basis = orthonormalize(projections)
    if len(basis) != d - len(v_basis):
        raise DegenerateBasisError(f"chart has dimension {len(basis)}, expected {d - len(v_basis)}")
    return LinearChart(basis=basis, ambient_dimension=d)


def _chart_axes(chart: LinearChart) -> List[int]:
    axes = []
    for vector in chart.basis:
        v = np.asarray(vector, dtype=float)
        axis = int(np.argmax(np.abs(v)))
        if v[axis] != 1.0 or np.count_nonzero(v) != 1:
            raise ChartMismatchError(f"chart vector {vector} is not a grid axis")
        axes.append(axis)
    if axes != sorted(axes):
        raise ChartMismatchError(f"chart axes {axes} are not in coordinate order")
    return axes


def _w_atom_positions(psi: Measure, v_basis: Sequence[Vector]) -> List[Vector]:
    return [a.position for a in torus.minkowski_project(psi, v_basis).atoms]


def extend_allocation(
    tau_w: AllocationMap,
    chart: LinearChart,
    v_basis: Sequence[Vector],
    phi: Measure,
    psi: Measure,
) -> AllocationMap:
    """
    Lift an allocation of the projected measures to the full torus.

    Source cell (v, w) sends phi(v, w) * tau_w(w -> w') / phi'(w) to (v, w');
    a projected atom target is split over the psi atoms on its fiber that lie
    in the source's V-slab (or over the whole fiber when the slab holds none).

    Raises:
        ChartMismatchError: if tau_w, chart and v_basis do not fit phi's torus
    """
    geometry = phi.geometry
    d = geometry.d
    if chart.ambient_dimension != d:
        raise ChartMismatchError(f"chart lives in R^{chart.ambient_dimension}, torus has dimension {d}")
    v_axes = torus.axes_of_basis(v_basis, d)
    w_axes = _chart_axes(chart)
    if sorted(v_axes + w_axes) != list(range(d)):
        raise ChartMismatchError(f"chart axes {w_axes} do not complement V axes {v_axes}")
    if tau_w.geometry != geometry.with_dimension(len(w_axes)):
        raise ChartMismatchError(f"chart allocation lives on {tau_w.geometry}, expected dimension {len(w_axes)}")

    w_geometry = tau_w.geometry
    w_atoms = _w_atom_positions(psi, v_basis)
    fibers: Dict[Vector, List[int]] = {}
    for i, atom in enumerate(psi.atoms):
        fibers.setdefault(tuple(atom.position[a] for a in w_axes), []).append(i)
    w_outgoing = tau_w.outgoing()

    pieces: Dict[int, Dict[Target, List[float]]] = {}
    for index, mass in enumerate(phi.cell_mass):
        if mass <= 0:
            continue
        cell = geometry.cell_multi_index(index)
        w_index = w_geometry.cell_index(tuple(cell[a] for a in w_axes))
        row = tau_w.entries[w_index]
        w_mass = w_outgoing[w_index]
        if not row or w_mass <= 0:
            raise ChartMismatchError(f"source cell {cell} has mass but its chart cell {w_index} sends nothing")

        for entry in row:
            share = mass * entry.mass / w_mass
            if entry.kind == TargetKind.CELL:
                target = list(cell)
                for a, x in zip(w_axes, w_geometry.cell_multi_index(entry.target)):
                    target[a] = x
                key = (TargetKind.CELL, geometry.cell_index(tuple(target)))
                pieces.setdefault(index, {}).setdefault(key, []).append(share)
            elif entry.kind == TargetKind.ATOM:
                if entry.target >= len(w_atoms):
                    raise ChartMismatchError(f"chart allocation targets unknown atom {entry.target}")
                fiber = fibers.get(w_atoms[entry.target], [])
                slab = [i for i in fiber if all(torus.atom_cell(psi.atoms[i], geometry)[a] == cell[a] for a in v_axes)]
                chosen = slab or fiber
                if not chosen:
                    raise ChartMismatchError(f"no atom of psi on the fiber of {w_atoms[entry.target]}")
                weight = math.fsum(psi.atoms[i].mass for i in chosen)
                for i in chosen:
                    key = (TargetKind.ATOM, i)
                    pieces.setdefault(index, {}).setdefault(key, []).append(share * psi.atoms[i].mass / weight)
            else:
                raise ChartMismatchError("point targets cannot be extended")

    entries = _finish_rows(phi, pieces)
    return AllocationMap(
        geometry=geometry,
        entries=entries,
        monge_defect=AllocationMap.defect_of(entries),
        case=AllocationCase.PROJECTED,
        pattern=tau_w.pattern,
        chart_allocation=tau_w,
    )


def project_allocation(alloc: AllocationMap, v_basis: Sequence[Vector], psi: Measure, window_volume: float = 1.0) -> AllocationMap:
    """Push a full-torus allocation down to the projected torus (inverse of extend_allocation)."""
    geometry = alloc.geometry
    v_axes = torus.axes_of_basis(v_basis, geometry.d)
    w_axes = [a for a in range(geometry.d) if a not in v_axes]
    w_geometry = geometry.with_dimension(len(w_axes))
    scale = window_volume / geometry.L ** len(v_axes)
    w_atom_index = {pos: i for i, pos in enumerate(_w_atom_positions(psi, v_basis))}

    pieces: Dict[int, Dict[Target, List[float]]] = {}
    for index, row in enumerate(alloc.entries):
        cell = geometry.cell_multi_index(index)
        w_index = w_geometry.cell_index(tuple(cell[a] for a in w_axes))
        for entry in row:
            if entry.kind == TargetKind.CELL:
                target_cell = geometry.cell_multi_index(entry.target)
                key = (TargetKind.CELL, w_geometry.cell_index(tuple(target_cell[a] for a in w_axes)))
            elif entry.kind == TargetKind.ATOM:
                position = tuple(psi.atoms[entry.target].position[a] for a in w_axes)
                key = (TargetKind.ATOM, w_atom_index[position])
            else:
                raise ChartMismatchError("point targets cannot be projected")
            pieces.setdefault(w_index, {}).setdefault(key, []).append(entry.mass)

    rows = []
    for w_index in range(w_geometry.cell_count):
        targets = pieces.get(w_index, {})
        merged = sorted(
            ((kind, target, math.fsum(values) * scale) for (kind, target), values in targets.items()),
            key=lambda x: (x[0].value, x[1]),
        )
        rows.append(tuple(AllocationEntry(kind=k, target=t, mass=m) for k, t, m in merged if m > 0))
    entries = tuple(rows)
    return AllocationMap(
        geometry=w_geometry,
        entries=entries,
        monge_defect=AllocationMap.defect_of(entries),
        case=alloc.chart_allocation.case if alloc.chart_allocation else alloc.case,
    )


def _check_uniform(phi: Measure, psi: Measure, tol: Optional[float]) -> None:
    for name, mu in (("phi", phi), ("psi", psi)):
        if mu.atoms:
            raise NotUniformError(f"{name} is fully translation invariant but has atoms")
        spread = max(mu.cell_mass) - min(mu.cell_mass)
        if spread > symmetry_tolerance(mu, tol):
            raise NotUniformError(f"{name} is fully translation invariant but cell masses spread by {spread!r}")


def _check_fiber_atoms(phi_w: Measure) -> None:
    """A projected cell with mass and an empty neighbourhood is an atom at this resolution."""
    if phi_w.atoms:
        raise FiberAtomError(f"projected source has {len(phi_w.atoms)} atom(s)")
    geometry = phi_w.geometry
    grid = phi_w.grid()
    radius = settings.fiber_atom_radius
    if radius < 1 or geometry.n <= 2 * radius:
        return
    neighbourhood = np.zeros_like(grid)
    for offset in np.ndindex(*((2 * radius + 1,) * geometry.d)):
        shift = tuple(o - radius for o in offset)
        if any(shift):
            neighbourhood += np.roll(grid, shift=shift, axis=tuple(range(geometry.d)))
    isolated = np.argwhere((grid > 0) & (neighbourhood <= 0))
    if len(isolated):
        cell = tuple(int(x) for x in isolated[0])
        raise FiberAtomError(f"fiber at chart cell {cell} carries isolated mass {grid[cell]!r}")


def balance(phi: Measure, psi: Measure, tol: Optional[float] = None) -> AllocationMap:
    """
    Translation-equivariant balancing allocation from diffuse phi onto psi.

    Args:
        phi: Diffuse source measure
        psi: Target measure with the same total
        tol: Absolute symmetry tolerance (default: relative to mean cell mass)

    Returns:
        AllocationMap; case records which branch produced it

    Raises:
        NotDiffuseError, TotalMassMismatchError, FiberAtomError, NotUniformError,
        IncompatibleDirectionError, HasInvariantDirectionError, EpsilonNotFoundError
    """
    validate_balance_inputs(phi, psi)
    geometry = phi.geometry
    group = joint_symmetry_group(phi, psi, tol)
    v_basis = group.invariant_basis
    logger.info(f"Balancing on {geometry.d}D torus n={geometry.n}: dim V = {len(v_basis)}")

    if len(v_basis) == geometry.d:
        _check_uniform(phi, psi, tol)
        return AllocationMap.identity(phi)

    if not v_basis:
        pattern = extract_point_process(encode_pair(phi, psi))
        return balance_with_auxiliary(phi, psi, pattern)

    phi_w = torus.minkowski_project(phi, v_basis)
    psi_w = torus.minkowski_project(psi, v_basis)
    _check_fiber_atoms(phi_w)
    tau_w = balance(phi_w, psi_w, tol)
    chart = gram_schmidt_chart(v_basis, geometry.d)
    return extend_allocation(tau_w, chart, v_basis, phi, psi)
