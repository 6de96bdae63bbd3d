import numpy as np
import pytest

from cli import run_pipeline
from models import Measure, TorusGeometry
from services.generators import load_manifest
from services.measure_io import parse_points, read_measure, write_measure


@pytest.fixture
def field_file(tmp_path):
    geometry = TorusGeometry(d=2, L=1.0, n=4)
    grid = np.arange(1, 17, dtype=float).reshape(4, 4) ** 2
    path = tmp_path / "field.measure"
    write_measure(path, Measure.from_grid(geometry, grid / grid.sum()))
    return path


def test_gen_writes_a_measure_and_records_the_scenario(tmp_path):
    out = tmp_path / "mu.measure"
    manifest = tmp_path / "manifest.json"
    code = run_pipeline(["gen", "--kind", "diffuse", "--seed", "3", "--n", "8", "--out", str(out),
                         "--manifest", str(manifest)])
    assert code == 0
    assert read_measure(out).geometry == TorusGeometry(d=2, L=1.0, n=8)
    scenario = load_manifest(manifest).scenarios[0]
    assert scenario.seed == 3
    assert scenario.expected.v_dimension == 0


def test_sym_prints_the_planted_lattice(tmp_path, capsys):
    out = tmp_path / "lattice.measure"
    assert run_pipeline(["gen", "--kind", "lattice", "--n", "8", "--seed", "5", "--out", str(out),
                         "--param", "generators=[[0.5,0],[0,0.5]]"]) == 0
    assert run_pipeline(["sym", str(out)]) == 0
    header, row = capsys.readouterr().out.splitlines()
    assert header == "generators,gap,v_dimension,order,closed"
    assert row == "4:0;0:4,0.5,0,4,true"


def test_pp_writes_points_and_trace(tmp_path, field_file):
    points = tmp_path / "field.points"
    trace = tmp_path / "trace.json"
    assert run_pipeline(["pp", str(field_file), "--out", str(points), "--trace", str(trace)]) == 0
    assert len(parse_points(points.read_text(), 4)) >= 1
    assert '"attempts"' in trace.read_text()


def test_pp_rejects_an_invariant_direction(tmp_path):
    out = tmp_path / "striped.measure"
    assert run_pipeline(["gen", "--kind", "invariant_direction", "--n", "8", "--out", str(out),
                         "--param", "axes=[0]"]) == 0
    assert run_pipeline(["pp", str(out)]) == 1


def test_alloc_identity_with_certificate(tmp_path, capsys):
    uniform = tmp_path / "uniform.measure"
    write_measure(uniform, Measure(geometry=TorusGeometry(d=1, L=1.0, n=4), cell_mass=(0.25,) * 4))
    certificate = tmp_path / "cert.csv"
    assert run_pipeline(["alloc", str(uniform), str(uniform), "--certificate", str(certificate),
                         "--out", str(tmp_path / "map.alloc")]) == 0
    assert certificate.read_text().splitlines()[0] == "target_kind,target_id,expected,received,residual"
    assert "failed: 0" in capsys.readouterr().out


def test_malformed_input_exits_2(tmp_path):
    bad = tmp_path / "bad.measure"
    bad.write_text("measure v1\n1 1 4\ncells 4\n1 2\n")
    assert run_pipeline(["sym", str(bad)]) == 2
    assert run_pipeline(["sym", str(tmp_path / "missing.measure")]) == 2


@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["gen"],
    ["gen", "--kind", "poisson", "--n", "two"],
    ["gen", "--kind", "diffuse", "--d", "5"],
    ["gen", "--kind", "diffuse", "--param", "novalue"],
])
def test_usage_errors_exit_2(argv):
    assert run_pipeline(argv) == 2


def test_verify_and_report(tmp_path, capsys):
    out = tmp_path / "reports"
    code = run_pipeline(["verify", "--campaign", "chart", "--count", "3", "--out", str(out), "--svg",
                         "--manifest", str(tmp_path / "none.json")])
    assert code == 0
    assert (out / "chart.csv").exists()
    assert (out / "chart.svg").exists()
    capsys.readouterr()

    assert run_pipeline(["report", str(out / "chart.csv"), "--out", str(tmp_path / "hist.svg")]) == 0
    assert "chart.orthonormality" in capsys.readouterr().out
    assert (tmp_path / "hist.svg").exists()
