import csv
import json

import pytest
from click.testing import CliRunner

from treebsde.cli import main
from treebsde.scenario import fixture_path


@pytest.fixture
def runner():
    return CliRunner()


def run(runner, *args):
    return runner.invoke(main, list(args), catch_exceptions=False)


def test_validate_ok(runner):
    res = run(runner, "validate", "S1")
    assert res.exit_code == 0
    assert json.loads(res.stdout)["ok"] is True


def test_validate_rejects_broken_kernel(runner):
    res = run(runner, "validate", str(fixture_path("invalid/broken_kernel")))
    assert res.exit_code == 2
    assert "node 0" in res.stderr and "not a probability" in res.stderr


def test_validate_rejects_phi_violation(runner):
    res = run(runner, "validate", str(fixture_path("invalid/phi_violation")))
    assert res.exit_code == 2
    assert "FAIL" in res.stderr and "Phi" in res.stderr


def test_missing_file_is_input_error(runner):
    res = run(runner, "validate", "no_such_scenario.yaml")
    assert res.exit_code == 2


def test_solve_bsde_writes_csv(runner, tmp_path):
    res = run(runner, "solve-bsde", "S1", "--out", str(tmp_path))
    assert res.exit_code == 0
    report = json.loads((tmp_path / "solve-bsde.json").read_text())
    assert report["schema_version"] == "1.0" and report["y0"] == pytest.approx(0.0)
    rows = list(csv.DictReader((tmp_path / "solution.csv").open()))
    assert len(rows) == 7
    for row in rows:
        assert float(row["Y"]) == pytest.approx(float(row["node"].count(".0") - row["node"].count(".1")))


def test_solve_bsde_bad_selection(runner):
    res = run(runner, "solve-bsde", "S3", "--sel", "0,5,0")
    assert res.exit_code == 2


def test_solve_rbsde_constant_obstacle(runner):
    res = run(runner, "solve-rbsde", "S1", "--obstacle", "0.5")
    assert res.exit_code == 0
    assert json.loads(res.stdout)["y0"] == pytest.approx(0.75)


def test_solve_2bsde(runner, tmp_path):
    res = run(runner, "solve-2bsde", "S3", "--out", str(tmp_path))
    assert res.exit_code == 0
    report = json.loads(res.stdout)
    assert report["y0"] == pytest.approx(0.4) and report["exhaustive"]
    assert (tmp_path / "value.csv").exists()
    k_rows = list(csv.DictReader((tmp_path / "K_paths.csv").open()))
    low = [r for r in k_rows if r["selection"] == "0 0 0"]
    assert all(float(r["K"].split(";")[-1]) == pytest.approx(0.8) for r in low)


def test_solve_2bsde_cap(runner):
    res = run(runner, "solve-2bsde", "S3", "--cap", "4")
    assert res.exit_code == 0
    assert json.loads(res.stdout)["exhaustive"] is False


def test_control(runner):
    res = run(runner, "control", "control_tilt")
    assert res.exit_code == 0
    assert json.loads(res.stdout)["value"] == pytest.approx(1.0)


def test_control_cap(runner):
    res = run(runner, "control", "control_discount", "--cap", "10")
    assert res.exit_code == 3


def test_constants_and_beta_star(runner):
    res = run(runner, "constants", "--beta", "10", "--phi", "0")
    assert json.loads(res.stdout)["M1_tilde"] == pytest.approx(0.64)
    res = run(runner, "beta-star", "--phi", "0")
    assert res.exit_code == 0
    assert json.loads(res.stdout)["beta_star"] == pytest.approx(14.280109889280518, abs=1e-9)
    assert run(runner, "constants", "--beta", "1", "--phi", "1.5").exit_code == 2


def test_verify_deterministic(runner):
    a = run(runner, "verify", "S1", "--suite", "bsde", "--random", "1", "--seed", "3")
    b = run(runner, "verify", "S1", "--suite", "bsde", "--random", "1", "--seed", "3")
    assert a.exit_code == 0 and a.stdout == b.stdout
    assert "PASS S1 bsde" in a.stderr


def test_verify_replay(runner, tmp_path):
    run(runner, "solve-bsde", "S2", "--out", str(tmp_path))
    report = tmp_path / "solve-bsde.json"
    good = run(runner, "verify", "S2", "--replay", str(report))
    assert good.exit_code == 0
    data = json.loads(report.read_text())
    data["nodes"][0]["Y"] += 0.01
    report.write_text(json.dumps(data))
    bad = run(runner, "verify", "S2", "--replay", str(report))
    assert bad.exit_code == 1 and "FAIL S2 replay: dynamics residual" in bad.stderr
