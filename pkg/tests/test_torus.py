import numpy as np
import pytest

from errors import (
    BadResolutionError,
    DimensionMismatchError,
    IncompatibleDirectionError,
    NonGridShiftError,
)
from models import Atom, Measure, TorusGeometry
from services import torus


def test_translate_by_one_cell_is_cyclic_shift(ramp):
    shifted = torus.translate(ramp, (0.25,))
    assert shifted.cell_mass == (4.0, 1.0, 2.0, 3.0)
    assert not shifted.approximate


def test_translate_back_and_forth_is_exact(asymmetric_plane):
    moved = torus.translate_by_index(asymmetric_plane, (3, 5))
    assert torus.translate_by_index(moved, (-3, -5)) == asymmetric_plane
    assert torus.total_mass(moved) == torus.total_mass(asymmetric_plane)


def test_translate_rejects_off_grid_shift(ramp):
    with pytest.raises(NonGridShiftError):
        torus.translate(ramp, (0.1,))


def test_translate_rejects_wrong_dimension(ramp):
    with pytest.raises(DimensionMismatchError):
        torus.translate(ramp, (0.25, 0.25))


def test_approximate_translate_splits_mass(line4):
    mu = Measure(geometry=line4, cell_mass=(1.0, 0.0, 0.0, 0.0))
    shifted = torus.translate(mu, (0.125,), exact=False)
    assert shifted.approximate
    assert shifted.cell_mass == (0.5, 0.5, 0.0, 0.0)
    assert torus.total_mass(shifted) == 1.0


def test_atoms_move_on_ticks_and_wrap(line4):
    mu = Measure(geometry=line4, cell_mass=(0.0,) * 4, atoms=(Atom(position=(0.75,), mass=1.0),))
    moved = torus.translate_by_index(mu, (1,))
    assert moved.atoms[0].position == (0.0,)


def test_wrap_helpers():
    assert torus.wrap_index(3, 4) == -1
    assert torus.wrap_index(2, 4) == 2
    assert torus.index_norm_sq((3, 0), 4) == 1
    assert torus.grid_shift((0.5,), TorusGeometry(d=1, L=1.0, n=4)) == (2,)
    assert torus.torus_distance((0.1,), (0.9,), 1.0) == pytest.approx(0.2)


def test_fine_lattice_places_cell_centers_between_grid_points(line4):
    T = torus.tick_count()
    centers = torus.cell_fine_coordinates(line4)
    assert centers[:, 0].tolist() == [T, 3 * T, 5 * T, 7 * T]
    assert torus.grid_point_fine((1,), line4) == (2 * T,)
    assert torus.fine_period(line4) == 8 * T


def test_minkowski_project_sums_invariant_axis(plane8):
    profile = np.arange(1.0, 9.0)
    grid = np.broadcast_to(profile, (8, 8))
    mu = Measure.from_grid(plane8, grid)
    projected = torus.minkowski_project(mu, [(1.0, 0.0)])
    assert projected.geometry == TorusGeometry(d=1, L=1.0, n=8)
    assert projected.cell_mass == tuple(8.0 * profile)


def test_minkowski_project_rejects_diagonal_and_full_space(asymmetric_plane):
    s = 2 ** -0.5
    with pytest.raises(IncompatibleDirectionError):
        torus.minkowski_project(asymmetric_plane, [(s, s)])
    with pytest.raises(IncompatibleDirectionError):
        torus.minkowski_project(asymmetric_plane, [(1.0, 0.0), (0.0, 1.0)])


def test_quantize_pools_and_floors(line4):
    mu = Measure(geometry=line4, cell_mass=(0.375, 0.125, 0.25, 0.25))
    assert torus.quantize(mu, 2, 0.25).cell_mass == (0.5, 0.5)
    coarse = torus.quantize(mu, 2, 0.3)
    assert coarse.cell_mass == (0.3, 0.3)
    assert torus.quantize(coarse, 2, 0.3) == coarse


def test_quantize_pools_atoms_into_their_cell(line4):
    mu = Measure(geometry=line4, cell_mass=(0.0,) * 4, atoms=(Atom(position=(0.625,), mass=0.5),))
    assert torus.quantize_codes(mu, 2, 0.25).tolist() == [0, 2]


def test_quantize_rejects_bad_resolution(ramp):
    with pytest.raises(BadResolutionError):
        torus.quantize(ramp, 3, 0.1)
    with pytest.raises(BadResolutionError):
        torus.quantize(ramp, 0, 0.1)
    with pytest.raises(BadResolutionError):
        torus.quantize(ramp, 2, 0.0)


def test_quantize_to_a_single_cell():
    mu = Measure(geometry=TorusGeometry(d=1, L=1.0, n=2), cell_mass=(0.3, 0.4))
    coarse = torus.quantize(mu, 1, 0.5)
    assert coarse.geometry.n == 1
    assert coarse.cell_mass == (0.5,)
