from pathlib import Path

import numpy as np
import pytest

from errors import UsageError
from models import AllocationEntry, AllocationMap, Atom, Measure, PointPattern, Scenario, ScenarioKind, ScenarioManifest, TargetKind
from pipelines import campaigns
from pipelines.campaigns import (
    balance_residuals,
    brute_force_prokhorov,
    random_site_pair,
    run_campaign,
    sample_shifts,
    summation_tolerance,
    verify_balance,
    verify_equivariance,
    verify_tessellation,
)
from services.generators import load_manifest
from services.prokhorov import prokhorov
from services.report_writer import write_report_csv
from services.tessellation import fair_tessellation


@pytest.fixture
def uniform_line(line4):
    return Measure(geometry=line4, cell_mass=(0.25,) * 4)


@pytest.fixture
def striped(plane8):
    return Measure.from_grid(plane8, np.broadcast_to(np.arange(1.0, 9.0) / 288.0, (8, 8)))


def test_identity_pipeline_is_equivariant(two_atoms, asymmetric_plane):
    report = verify_equivariance("identity", [(1, two_atoms), (2, asymmetric_plane)], shifts_per_sample=5)
    assert len(report.records) == 10
    assert report.exit_code == 0
    assert report.records[0].check_id == "equivariance.identity.shift00"


def test_anchored_pipeline_is_caught(monkeypatch, asymmetric_plane, plane8):
    monkeypatch.setitem(campaigns.PIPELINES, "anchored", lambda mu: frozenset({(0, 0)}))
    report = verify_equivariance("anchored", [(3, asymmetric_plane)], shifts_per_sample=8)
    nonzero = [k for k in sample_shifts(plane8, 8, 3) if any(k)]
    assert report.failed_count == len(nonzero)
    assert all(r.value == 2.0 for r in report.records if not r.passed)


def test_consistent_errors_count_as_equivariant(striped):
    report = verify_equivariance("extract", [(4, striped)], shifts_per_sample=3)
    assert report.exit_code == 0
    assert "HasInvariantDirectionError" in report.records[0].detail


def test_equivariance_needs_a_corpus_and_a_known_pipeline(two_atoms):
    with pytest.raises(UsageError):
        verify_equivariance("identity", [])
    with pytest.raises(UsageError):
        verify_equivariance("nonsense", [(1, two_atoms)])


def test_identity_allocation_balances(uniform_line):
    report = verify_balance(AllocationMap.identity(uniform_line), uniform_line, uniform_line, seed=9)
    assert [r.check_id for r in report.records] == ["balance.target_residual", "balance.source_residual"]
    assert report.exit_code == 0
    assert all(r.seed == 9 for r in report.records)


def test_corrupted_allocation_is_flagged(uniform_line, line4):
    piled = AllocationMap(
        geometry=line4,
        entries=tuple((AllocationEntry(kind=TargetKind.CELL, target=0, mass=0.25),) for _ in range(4)),
    )
    report = verify_balance(piled, uniform_line, uniform_line)
    target, source = report.records
    assert not target.passed
    assert target.value == pytest.approx(0.75)
    assert target.tolerance == summation_tolerance(1.0, 4)
    assert source.passed

    rows = balance_residuals(piled, uniform_line)
    assert [(r["target_id"], r["received"]) for r in rows] == [(0, 1.0), (1, 0.0), (2, 0.0), (3, 0.0)]


def test_residuals_are_absolute_and_judged_against_rounding(line4):
    phi = Measure(geometry=line4, cell_mass=(1e-6, 0.25, 0.25, 0.5 - 1e-6))
    nudged = AllocationMap(
        geometry=line4,
        entries=tuple(
            (AllocationEntry(kind=TargetKind.CELL, target=i, mass=m + (1e-7 if i == 0 else 0.0)),)
            for i, m in enumerate(phi.cell_mass)
        ),
    )
    report = verify_balance(nudged, phi, phi)
    target, source = report.records
    assert not target.passed and not source.passed
    assert target.value == pytest.approx(1e-7)
    assert balance_residuals(nudged, phi)[0]["residual"] == pytest.approx(1e-7)

    assert summation_tolerance(2.0, 10) == pytest.approx(2.0 * (1e-9 + 10 * np.finfo(float).eps))
    assert summation_tolerance(0.0, 10) == 0.0


def test_allocation_on_another_torus_is_flagged(uniform_line, two_atoms):
    report = verify_balance(AllocationMap.identity(uniform_line), two_atoms, two_atoms)
    assert [r.check_id for r in report.records] == ["balance.geometry"]
    assert report.exit_code == 1


def test_tessellation_capacity_check(uniform_line, line4):
    pattern = PointPattern(geometry=line4, points=((0.0,), (0.5,)), separation=0.5)
    record = verify_tessellation(fair_tessellation(uniform_line, pattern), uniform_line, seed=2)
    assert record.passed
    assert record.detail == "points=2"


def test_brute_force_agrees_on_a_known_pair(plane8):
    mu = Measure(geometry=plane8, cell_mass=(0.0,) * 64, atoms=(Atom(position=(0.0, 0.0), mass=1.0),))
    nu = Measure(geometry=plane8, cell_mass=(0.0,) * 64, atoms=(Atom(position=(0.25, 0.0), mass=1.0),))
    assert brute_force_prokhorov(mu, nu) == 0.25


@pytest.mark.parametrize("seed", range(6))
def test_flow_matches_brute_force(seed):
    mu, nu = random_site_pair(seed)
    assert prokhorov(mu, nu).midpoint == pytest.approx(brute_force_prokhorov(mu, nu), abs=1e-9)


def test_chart_campaign_is_sorted_and_passes():
    report = run_campaign("chart", count=4, jobs=1)
    assert [r.seed for r in report.records] == [0, 1, 2, 3]
    assert report.exit_code == 0


@pytest.mark.slow
def test_defect_campaign_decays():
    report = run_campaign("defect", jobs=1)
    assert [r.check_id for r in report.records] == ["defect.ratio_128_64", "defect.ratio_64_32"]
    assert report.exit_code == 0


def test_necessity_campaign_on_an_invariant_scenario():
    manifest = ScenarioManifest(name="t", scenarios=[
        Scenario(seed=31, kind=ScenarioKind.INVARIANT_DIRECTION, n=8, parameters={"axes": [0]}),
    ])
    report = run_campaign("necessity", manifest, jobs=1)
    assert [r.check_id for r in report.records] == ["necessity.rejected", "necessity.v_dimension"]
    assert report.exit_code == 0


@pytest.mark.slow
def test_symmetry_campaign_recovers_a_planted_lattice():
    manifest = ScenarioManifest(name="t", scenarios=[
        Scenario(seed=41, kind=ScenarioKind.LATTICE, L=4.0, n=16,
                 parameters={"generators": [[1.0, 0.0], [0.0, 1.0]], "expected_N": 3}),
    ])
    report = run_campaign("symmetry", manifest, jobs=1)
    assert {r.check_id for r in report.records} == {"symmetry.generators", "symmetry.closed", "symmetry.shell_index"}
    assert report.exit_code == 0


def test_campaign_usage_errors():
    with pytest.raises(UsageError):
        run_campaign("nonsense")
    with pytest.raises(UsageError):
        run_campaign("necessity")
    with pytest.raises(UsageError):
        run_campaign("balance", ScenarioManifest(name="empty", scenarios=[]))


@pytest.fixture
def desk_manifest():
    """One small scenario of every kind."""
    return ScenarioManifest(name="desk", scenarios=[
        Scenario(seed=11, kind=ScenarioKind.POISSON, n=4, parameters={"intensity": 4.0}),
        Scenario(seed=21, kind=ScenarioKind.DIFFUSE, n=4, parameters={"smoothness": 2.0, "atom_intensity": 3.0}),
        Scenario(seed=31, kind=ScenarioKind.INVARIANT_DIRECTION, n=4, parameters={"axes": [1]}),
        Scenario(seed=41, kind=ScenarioKind.LATTICE, L=4.0, n=8,
                 parameters={"generators": [[1.0, 0.0], [0.0, 1.0]], "expected_N": 3}),
    ])


def test_campaign_report_is_deterministic(tmp_path, desk_manifest):
    bodies = []
    for run in ("first", "second"):
        path = tmp_path / f"{run}.csv"
        write_report_csv(run_campaign("equivariance", desk_manifest, jobs=1, shifts=3), path)
        text = path.read_bytes()
        assert text.startswith(b"# campaign=equivariance")
        bodies.append(text.split(b"\n", 1)[1])
    assert bodies[0] == bodies[1]
    assert bodies[0].startswith(b"check_id,seed,passed,value,tolerance,detail")


@pytest.mark.parametrize(
    "campaign",
    [c if c != "defect" else pytest.param(c, marks=pytest.mark.slow) for c in campaigns.CAMPAIGNS],
)
def test_every_campaign_runs_on_a_small_manifest(campaign, desk_manifest):
    report = run_campaign(campaign, desk_manifest, jobs=1, shifts=2, count=2)
    assert report.campaign == campaign
    assert report.records
    assert report.records == report.sorted_records()


@pytest.mark.slow
def test_shipped_lattices_are_recovered():
    manifest = load_manifest(Path(__file__).resolve().parent.parent / "corpus" / "manifest.json")
    lattices = [s for s in manifest.scenarios if s.kind == ScenarioKind.LATTICE]
    report = run_campaign("symmetry", ScenarioManifest(name="lattices", scenarios=lattices), jobs=1)
    assert len(report.records) == 3 * len(lattices)
    assert report.exit_code == 0
