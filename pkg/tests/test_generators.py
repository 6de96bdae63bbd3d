import math
from pathlib import Path

import numpy as np
import pytest

from errors import BadLatticeError, MalformedFileError, UsageError
from models import Scenario, ScenarioKind, ScenarioManifest, TorusGeometry
from services import torus
from services.generators import (
    gen_lattice_symmetric,
    gen_poisson,
    gen_with_invariant_direction,
    generate,
    lattice_indices,
    load_manifest,
    planted_truth,
    save_manifest,
)
from services.symmetry import span_subgroup, symmetry_group

CORPUS = Path(__file__).resolve().parent.parent / "corpus"


def test_same_seed_same_measure():
    scenario = Scenario(seed=7, kind=ScenarioKind.DIFFUSE, n=8)
    assert generate(scenario) == generate(scenario)
    assert generate(scenario) != generate(scenario.model_copy(update={"seed": 8}))


def test_poisson_atoms_sit_on_ticks(plane8):
    mu = gen_poisson(plane8, 20.0, seed=3)
    assert not any(mu.cell_mass)
    assert mu.atoms
    for atom in mu.atoms:
        assert all(torus.ticks_of(x, plane8.L) is not None for x in atom.position)
        assert atom.mass == float(int(atom.mass))


def test_poisson_rejects_bad_intensity(plane8):
    with pytest.raises(UsageError):
        gen_poisson(plane8, 0.0, seed=1)


def test_diffuse_field_is_normalized():
    scenario = Scenario(seed=5, kind=ScenarioKind.DIFFUSE, n=8, parameters={"total": 2.5})
    mu = generate(scenario)
    assert mu.is_diffuse
    assert min(mu.cell_mass) >= 0.0
    assert math.fsum(mu.cell_mass) == pytest.approx(2.5, rel=1e-12)


def test_invariant_direction_is_exact(plane8):
    grid = gen_with_invariant_direction(plane8, [0], seed=9).grid()
    assert np.array_equal(grid, np.broadcast_to(grid[0], (8, 8)))
    assert not np.array_equal(grid[:, 0], grid[:, 1])


def test_all_axes_invariant_is_uniform(plane8):
    mu = gen_with_invariant_direction(plane8, [0, 1], seed=9, total=1.0)
    assert set(mu.cell_mass) == {1.0 / 64}


def test_invariant_direction_rejects_bad_axes(plane8):
    with pytest.raises(UsageError):
        gen_with_invariant_direction(plane8, [2], seed=1)


def test_lattice_indices():
    geometry = TorusGeometry(d=2, L=4.0, n=16)
    assert lattice_indices(geometry, [(1.0, 0.0), (0.0, 1.0)]) == [(4, 0), (0, 4)]
    with pytest.raises(BadLatticeError):
        lattice_indices(geometry, [(0.3, 0.0)])
    with pytest.raises(BadLatticeError):
        lattice_indices(geometry, [(1.0,)])


def test_lattice_must_not_plant_an_invariant_direction():
    geometry = TorusGeometry(d=2, L=1.0, n=8)
    with pytest.raises(BadLatticeError):
        gen_lattice_symmetric(geometry, [(0.125, 0.0)], seed=1)
    with pytest.raises(BadLatticeError):
        gen_lattice_symmetric(geometry, [(0.125, 0.25)], seed=1)


def test_planted_lattice_is_a_symmetry():
    scenario = Scenario(
        seed=41, kind=ScenarioKind.LATTICE, d=2, L=4.0, n=16,
        parameters={"generators": [[1.0, 0.0], [0.0, 1.0]]},
    )
    truth = planted_truth(scenario)
    assert truth.symmetry_generators == [(4, 0), (0, 4)]
    assert truth.v_dimension == 0
    planted = span_subgroup(truth.symmetry_generators, 16, 2)
    assert planted <= set(symmetry_group(generate(scenario)).elements)


def test_planted_truth_of_other_kinds():
    assert planted_truth(Scenario(seed=1, kind=ScenarioKind.INVARIANT_DIRECTION, parameters={"axes": [0, 1]})).v_dimension == 2
    assert planted_truth(Scenario(seed=1, kind=ScenarioKind.POISSON)).diffuse is False


def test_shipped_manifest_loads():
    manifest = load_manifest(CORPUS / "manifest.json")
    kinds = [s.kind for s in manifest.scenarios]
    assert set(kinds) == set(ScenarioKind)
    assert kinds.count(ScenarioKind.POISSON) + kinds.count(ScenarioKind.DIFFUSE) == 50
    assert kinds.count(ScenarioKind.DIFFUSE) == 30
    assert kinds.count(ScenarioKind.INVARIANT_DIRECTION) == 30
    lattices = {(s.n, s.parameters["expected_N"]) for s in manifest.scenarios if s.kind == ScenarioKind.LATTICE}
    assert {(64, 3), (64, 5), (64, 9)} <= lattices
    for scenario in manifest.scenarios:
        if scenario.expected is not None and scenario.expected.v_dimension is not None:
            assert planted_truth(scenario).v_dimension == scenario.expected.v_dimension


def test_manifest_save_and_load(tmp_path):
    manifest = ScenarioManifest(name="tiny", scenarios=[Scenario(seed=1, kind=ScenarioKind.POISSON, n=4)])
    path = tmp_path / "manifest.json"
    save_manifest(path, manifest)
    assert load_manifest(path) == manifest


def test_broken_manifest(tmp_path):
    path = tmp_path / "manifest.json"
    path.write_text('{"name": "x", "scenarios": [{"seed": -1, "kind": "poisson"}]}')
    with pytest.raises(MalformedFileError):
        load_manifest(path)
