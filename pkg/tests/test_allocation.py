import numpy as np
import pytest

from errors import (
    DegenerateBasisError,
    FiberAtomError,
    IncompatibleDirectionError,
    NotDiffuseError,
    NotUniformError,
    TotalMassMismatchError,
)
from models import AllocationCase, Atom, Measure, TargetKind, TorusGeometry
from pipelines.allocation import (
    balance,
    balance_with_auxiliary,
    encode_pair,
    extend_allocation,
    gram_schmidt_chart,
    project_allocation,
)
from pipelines.campaigns import defect_scenario, verify_balance
from services import torus
from services.tessellation import within_cell_match


@pytest.fixture
def uniform_line(line4):
    return Measure(geometry=line4, cell_mass=(0.25,) * 4)


@pytest.fixture
def striped(plane8):
    """Invariant along x, increasing along y."""
    grid = np.broadcast_to(np.arange(1.0, 9.0) / 288.0, (8, 8))
    return Measure.from_grid(plane8, grid)


def test_encode_pair_weights_the_target(ramp):
    encoded = encode_pair(ramp, ramp, weight=2.0)
    assert encoded.cell_mass == (3.0, 6.0, 9.0, 12.0)


def test_chart_of_an_axis():
    chart = gram_schmidt_chart([(1.0, 0.0, 0.0)], 3)
    assert np.allclose(chart.matrix(), [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    assert chart.dimension == 2


def test_chart_of_a_diagonal_is_orthogonal_to_it():
    v = (2 ** -0.5, 2 ** -0.5)
    chart = gram_schmidt_chart([v], 2)
    assert chart.dimension == 1
    assert chart.orthonormality_residual() <= 1e-12
    assert abs(np.dot(chart.basis[0], v)) <= 1e-12


def test_chart_rejects_dependent_basis():
    with pytest.raises(DegenerateBasisError):
        gram_schmidt_chart([(1.0, 0.0), (2.0, 0.0)], 2)
    with pytest.raises(DegenerateBasisError):
        gram_schmidt_chart([])


def test_uniform_pair_is_balanced_by_identity(uniform_line):
    alloc = balance(uniform_line, uniform_line)
    assert alloc.case == AllocationCase.IDENTITY
    assert alloc.monge_defect == 0.0
    assert [[e.target for e in row] for row in alloc.entries] == [[0], [1], [2], [3]]


def test_invariant_atomic_target_is_not_uniform(uniform_line, line4):
    comb = Measure(
        geometry=line4,
        cell_mass=(0.0,) * 4,
        atoms=tuple(Atom(position=(x,), mass=0.25) for x in (0.0, 0.25, 0.5, 0.75)),
    )
    with pytest.raises(NotUniformError):
        balance(uniform_line, comb)


def test_balance_preconditions(uniform_line, two_atoms, line4):
    with pytest.raises(NotDiffuseError):
        balance(two_atoms, two_atoms)
    with pytest.raises(TotalMassMismatchError):
        balance(uniform_line, Measure(geometry=line4, cell_mass=(0.5,) * 4))


def test_auxiliary_balance_sends_a_third_to_each_atom():
    phi, psi, pattern = defect_scenario(32)
    alloc = balance_with_auxiliary(phi, psi, pattern)
    total = torus.total_mass(phi)
    assert alloc.case == AllocationCase.AUXILIARY
    incoming = alloc.incoming()
    assert set(incoming) == {(TargetKind.ATOM, 0), (TargetKind.ATOM, 1), (TargetKind.ATOM, 2)}
    for value in incoming.values():
        assert value == pytest.approx(total / 3, rel=1e-9)
    assert all(r.passed for r in verify_balance(alloc, phi, psi).records)
    assert 0.0 < alloc.monge_defect < 1.0


def test_monge_defect_shrinks_with_the_grid():
    defects = []
    for n in (32, 64):
        phi, psi, pattern = defect_scenario(n)
        defects.append(balance_with_auxiliary(phi, psi, pattern).monge_defect)
    assert defects[1] < defects[0]


def test_extend_and_project_round_trip(striped, plane8):
    v_basis = ((1.0, 0.0),)
    line8 = plane8.with_dimension(1)
    phi_w = torus.minkowski_project(striped, v_basis)
    psi = Measure.from_grid(plane8, np.full((8, 8), 1.0 / 64))
    psi_w = Measure(geometry=line8, cell_mass=(0.125,) * 8)
    tau_w = within_cell_match(phi_w, psi_w, (0.0,))

    alloc = extend_allocation(tau_w, gram_schmidt_chart(v_basis, 2), v_basis, striped, psi)
    assert alloc.case == AllocationCase.PROJECTED
    assert alloc.chart_allocation == tau_w

    for index, row in enumerate(alloc.entries):
        x = plane8.cell_multi_index(index)[0]
        assert {plane8.cell_multi_index(e.target)[0] for e in row} == {x}
    for value in alloc.incoming().values():
        assert value == pytest.approx(1.0 / 64, rel=1e-9)

    projected = project_allocation(alloc, v_basis, psi)
    assert projected.geometry == line8
    for got, expected in zip(projected.entries, tau_w.entries):
        got_masses = {e.target: e.mass for e in got}
        expected_masses = {e.target: e.mass for e in expected}
        assert got_masses.keys() == expected_masses.keys()
        for target, mass in expected_masses.items():
            assert got_masses[target] == pytest.approx(mass, rel=1e-9)


def test_isolated_fiber_mass_is_an_atom(plane8):
    grid = np.zeros((8, 8))
    grid[:, 2] = 1.0 / 8
    phi = Measure.from_grid(plane8, grid)
    with pytest.raises(FiberAtomError):
        balance(phi, phi)


def test_diagonal_invariance_cannot_be_projected(plane8):
    profile = np.arange(1.0, 9.0)
    i, j = np.indices((8, 8))
    phi = Measure.from_grid(plane8, profile[(j - i) % 8] / 288.0)
    with pytest.raises(IncompatibleDirectionError):
        balance(phi, phi)


def test_diffuse_onto_atoms_end_to_end():
    geometry = TorusGeometry(d=2, L=1.0, n=4)
    grid = np.arange(1, 17, dtype=float).reshape(4, 4) ** 2
    phi = Measure.from_grid(geometry, grid / grid.sum())
    psi = Measure(
        geometry=geometry,
        cell_mass=(0.0,) * 16,
        atoms=(Atom(position=(0.25, 0.5), mass=0.75), Atom(position=(0.625, 0.125), mass=0.25)),
    )
    alloc = balance(phi, psi)
    assert alloc.case == AllocationCase.AUXILIARY
    assert len(alloc.pattern) >= 1
    report = verify_balance(alloc, phi, psi)
    assert report.exit_code == 0


@pytest.fixture
def product_pair():
    """Pair on a 4x4 grid, uniform along x and asymmetric along y."""
    geometry = TorusGeometry(d=2, L=1.0, n=4)
    g = np.array([1.0, 4.0, 9.0, 16.0])
    h = np.array([4.0, 1.0, 3.0, 2.0])
    phi = Measure.from_grid(geometry, np.broadcast_to(g / (4 * g.sum()), (4, 4)))
    psi = Measure.from_grid(geometry, np.broadcast_to(h / (4 * h.sum()), (4, 4)))
    return phi, psi


def test_product_pair_is_balanced_through_the_projection(product_pair):
    phi, psi = product_pair
    geometry = phi.geometry
    alloc = balance(phi, psi)
    assert alloc.case == AllocationCase.PROJECTED
    assert alloc.chart_allocation is not None
    for index, row in enumerate(alloc.entries):
        x = geometry.cell_multi_index(index)[0]
        assert all(geometry.cell_multi_index(e.target)[0] == x for e in row)
    assert verify_balance(alloc, phi, psi).exit_code == 0


def test_projected_marginal_is_the_direct_line_allocation(product_pair):
    phi, psi = product_pair
    v_basis = ((1.0, 0.0),)
    direct = balance(torus.minkowski_project(phi, v_basis), torus.minkowski_project(psi, v_basis))
    alloc = balance(phi, psi)
    assert alloc.chart_allocation == direct

    marginal = project_allocation(alloc, v_basis, psi)
    for got, expected in zip(marginal.entries, direct.entries):
        assert [(e.kind, e.target) for e in got] == [(e.kind, e.target) for e in expected]
        assert np.allclose([e.mass for e in got], [e.mass for e in expected], rtol=1e-12, atol=1e-15)


def keyed_rows(alloc, psi, shift):
    """Allocation rows keyed by shifted source cell, with targets keyed by shifted cell."""
    geometry = alloc.geometry
    n = geometry.n

    def moved(cell):
        return tuple((x + s) % n for x, s in zip(cell, shift))

    rows = {}
    for index, row in enumerate(alloc.entries):
        targets = {}
        for e in row:
            if e.kind == TargetKind.ATOM:
                cell = torus.atom_cell(psi.atoms[e.target], geometry)
            else:
                cell = geometry.cell_multi_index(e.target)
            targets[(e.kind, moved(cell))] = e.mass
        rows[moved(geometry.cell_multi_index(index))] = targets
    return rows


def test_balance_commutes_with_grid_shifts():
    geometry = TorusGeometry(d=2, L=1.0, n=4)
    grid = np.arange(1, 17, dtype=float).reshape(4, 4) ** 2
    phi = Measure.from_grid(geometry, grid / grid.sum())
    psi = Measure(
        geometry=geometry,
        cell_mass=(0.0,) * 16,
        atoms=(Atom(position=(0.25, 0.5), mass=0.75), Atom(position=(0.625, 0.125), mass=0.25)),
    )
    base = balance(phi, psi)
    mismatches = 0
    for k in [(1, 0), (0, 3), (2, 2), (3, 1)]:
        moved_psi = torus.translate_by_index(psi, k)
        moved = keyed_rows(balance(torus.translate_by_index(phi, k), moved_psi), moved_psi, (0, 0))
        expected = keyed_rows(base, psi, k)
        assert moved.keys() == expected.keys()
        for cell, targets in expected.items():
            if moved[cell].keys() != targets.keys():
                mismatches += 1
                continue
            mismatches += sum(not np.isclose(moved[cell][t], m, rtol=1e-12, atol=1e-15) for t, m in targets.items())
    assert mismatches == 0
