"""Shared fixtures for the factorlab test suite."""

import numpy as np
import pytest

from models import Atom, Measure, TorusGeometry


@pytest.fixture
def line4():
    """1D torus of side 1 with 4 cells."""
    return TorusGeometry(d=1, L=1.0, n=4)


@pytest.fixture
def plane8():
    """2D unit torus with an 8x8 grid."""
    return TorusGeometry(d=2, L=1.0, n=8)


@pytest.fixture
def ramp(line4):
    """Density [1, 2, 3, 4] on the 4-cell line."""
    return Measure(geometry=line4, cell_mass=(1.0, 2.0, 3.0, 4.0))


@pytest.fixture
def asymmetric_plane(plane8):
    """Diffuse 2D measure with no nontrivial grid symmetry (integer masses, distinct sums along every axis)."""
    grid = np.arange(1, 65, dtype=float).reshape(8, 8) ** 2
    return Measure.from_grid(plane8, grid / grid.sum())


@pytest.fixture
def two_atoms(plane8):
    """Two atoms of unequal mass on the atom sub-grid."""
    return Measure(
        geometry=plane8,
        cell_mass=(0.0,) * 64,
        atoms=(Atom(position=(0.25, 0.5), mass=0.75), Atom(position=(0.625, 0.125), mass=0.25)),
    )
