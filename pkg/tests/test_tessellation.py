import numpy as np
import pytest

from errors import EmptyPatternError, MassMismatchError, NotDiffuseError
from models import AllocationCase, Atom, Measure, PointPattern, TargetKind, TorusGeometry
from services import torus
from services.tessellation import (
    fair_tessellation,
    monotone_match,
    point_grid_index,
    traversal_keys,
    within_cell_match,
)


def pattern_of(geometry, *points):
    separation = min(
        (torus.torus_distance(a, b, geometry.L) for i, a in enumerate(points) for b in points[i + 1:]),
        default=float("inf"),
    )
    return PointPattern(geometry=geometry, points=points, separation=separation)


def test_uniform_line_goes_to_nearest_point(line4):
    uniform = Measure(geometry=line4, cell_mass=(0.25,) * 4)
    alloc = fair_tessellation(uniform, pattern_of(line4, (0.0,), (0.5,)))
    targets = [[(e.kind, e.target) for e in row] for row in alloc.entries]
    assert targets == [[(TargetKind.POINT, 0)], [(TargetKind.POINT, 1)], [(TargetKind.POINT, 1)], [(TargetKind.POINT, 0)]]
    assert alloc.incoming() == {(TargetKind.POINT, 0): 0.5, (TargetKind.POINT, 1): 0.5}
    assert alloc.monge_defect == 0.0
    assert alloc.case == AllocationCase.TESSELLATION


def test_capacities_are_equal(asymmetric_plane, plane8):
    pattern = pattern_of(plane8, (0.0, 0.0), (0.5, 0.25), (0.25, 0.75))
    alloc = fair_tessellation(asymmetric_plane, pattern)
    capacity = torus.total_mass(asymmetric_plane) / 3
    for p in range(3):
        assert alloc.incoming()[(TargetKind.POINT, p)] == pytest.approx(capacity, rel=1e-12)
    assert alloc.outgoing() == pytest.approx(list(asymmetric_plane.cell_mass), rel=1e-12)


def test_atoms_are_tessellated_too(two_atoms, plane8):
    alloc = fair_tessellation(two_atoms, pattern_of(plane8, (0.25, 0.5), (0.625, 0.125)))
    assert all(row == () for row in alloc.entries)
    assert alloc.incoming()[(TargetKind.POINT, 0)] == pytest.approx(0.5)
    assert alloc.incoming()[(TargetKind.POINT, 1)] == pytest.approx(0.5)


def test_tessellation_moves_with_the_measure(asymmetric_plane, plane8):
    points = ((0.0, 0.0), (0.5, 0.25), (0.25, 0.75))
    k = (3, 2)
    base = fair_tessellation(asymmetric_plane, pattern_of(plane8, *points))
    moved_points = tuple(tuple((x + s * plane8.h) % 1.0 for x, s in zip(p, k)) for p in points)
    moved = fair_tessellation(torus.translate_by_index(asymmetric_plane, k), pattern_of(plane8, *moved_points))

    index_of = {point_grid_index(p, plane8): i for i, p in enumerate(moved.pattern.points)}
    for i, row in enumerate(base.entries):
        cell = plane8.cell_multi_index(i)
        target_cell = plane8.cell_index(tuple((x + s) % 8 for x, s in zip(cell, k)))
        expected = {}
        for e in row:
            grid = point_grid_index(base.pattern.points[e.target], plane8)
            expected[index_of[tuple((x + s) % 8 for x, s in zip(grid, k))]] = e.mass
        got = {e.target: e.mass for e in moved.entries[target_cell]}
        assert got.keys() == expected.keys()
        for p, mass in expected.items():
            assert got[p] == pytest.approx(mass, rel=1e-12, abs=1e-15)


def test_empty_pattern_is_rejected(ramp, line4):
    with pytest.raises(EmptyPatternError):
        fair_tessellation(ramp, PointPattern(geometry=line4, points=(), separation=float("inf")))


def test_monotone_match_follows_cumulative_mass():
    matched = monotone_match([("a", 0.5), ("b", 0.5)], [("x", 0.25), ("y", 0.75)])
    assert matched == [("a", "x", 0.25), ("a", "y", 0.25), ("b", "y", 0.5)]
    with pytest.raises(MassMismatchError):
        monotone_match([("a", 1.0)], [("x", 0.5)])


def test_traversal_keys():
    assert traversal_keys([(3,), (0,), (1,)], (1,), 4) == [2, 3, 0]
    keys = traversal_keys([(0, 0), (0, 1), (1, 0), (1, 1)], (0, 0), 2)
    assert sorted(keys) == [0, 1, 2, 3]
    assert keys[0] == 0


def test_within_cell_match_onto_an_atom(line4):
    phi = Measure(geometry=line4, cell_mass=(0.25,) * 4)
    psi = Measure(geometry=line4, cell_mass=(0.0,) * 4, atoms=(Atom(position=(0.5,), mass=1.0),))
    alloc = within_cell_match(phi, psi, (0.0,))
    assert alloc.case == AllocationCase.LOCAL
    assert all([(e.kind, e.target) for e in row] == [(TargetKind.ATOM, 0)] for row in alloc.entries)
    assert alloc.monge_defect == 0.0


def test_within_cell_match_is_monotone_from_the_anchor(line4):
    phi = Measure(geometry=line4, cell_mass=(0.25,) * 4)
    psi = Measure(geometry=line4, cell_mass=(0.0, 0.5, 0.5, 0.0))
    alloc = within_cell_match(phi, psi, (0.0,))
    assert [[e.target for e in row] for row in alloc.entries] == [[1], [1], [2], [2]]


def test_within_cell_match_needs_diffuse_source(two_atoms, plane8):
    with pytest.raises(NotDiffuseError):
        within_cell_match(two_atoms, two_atoms, (0.0, 0.0))


def blocking_pairs(alloc, mu):
    """(cell, point) pairs where the cell wants the point and the point would take it."""
    geometry = mu.geometry
    points = alloc.pattern.points
    capacity = torus.total_mass(mu) / len(points)
    incoming = alloc.incoming()

    def dist(index, p):
        return torus.torus_distance(geometry.cell_center(index), points[p], geometry.L)

    served = {p: [] for p in range(len(points))}
    for index, row in enumerate(alloc.entries):
        for e in row:
            served[e.target].append(index)

    found = []
    for index, row in enumerate(alloc.entries):
        if not row:
            continue
        worst_taken = max(dist(index, e.target) for e in row)
        for p in range(len(points)):
            wants = dist(index, p) < worst_taken
            spare = capacity - incoming.get((TargetKind.POINT, p), 0.0) > 1e-12
            takes = spare or any(dist(other, p) > dist(index, p) for other in served[p])
            if wants and takes:
                found.append((index, p))
    return found


@pytest.mark.parametrize(
    "shape, points, seed",
    [
        ((4,), ((0.0,), (0.5,)), 1),
        ((8,), ((0.125,), (0.25,), (0.75,)), 2),
        ((4, 4), ((0.0, 0.0), (0.5, 0.5)), 3),
        ((4, 4), ((0.25, 0.0), (0.5, 0.75), (0.0, 0.5)), 4),
        ((8, 8), ((0.0, 0.0), (0.5, 0.25), (0.25, 0.75)), 5),
        ((8, 8), ((0.125, 0.125), (0.125, 0.25), (0.625, 0.5), (0.875, 0.875)), 6),
    ],
)
def test_tessellation_has_no_blocking_pair(shape, points, seed):
    geometry = TorusGeometry(d=len(shape), L=1.0, n=shape[0])
    rng = np.random.default_rng(seed)
    grid = rng.random(shape)
    grid[rng.random(shape) < 0.25] = 0.0
    mu = Measure.from_grid(geometry, grid / grid.sum())
    alloc = fair_tessellation(mu, pattern_of(geometry, *points))
    assert blocking_pairs(alloc, mu) == []
