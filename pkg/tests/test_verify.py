import numpy as np
import pytest

from treebsde.bsde import solve_bsde
from treebsde.randomized import random_scenario, random_spec
from treebsde.reports import dumps, envelope, replay_checks, solution_from_payload, solution_payload
from treebsde.lattice import TreeError
from treebsde.scenario import (fixture_names, fixture_path, load_fixture, load_spec,
                               scenario_from_spec, validate_scenario)
from treebsde.verify import SUITES, run_random, run_suites

VALID_FIXTURES = [n for n in fixture_names() if not n.startswith("invalid")]


@pytest.mark.parametrize("name", VALID_FIXTURES)
def test_fixtures_validate(name):
    rep = validate_scenario(load_fixture(name))
    assert rep.ok, [c.detail for c in rep.failures()]


@pytest.mark.parametrize("phi", [0.05, 0.3, 0.9])
def test_zero_generator_any_phi(phi):
    spec = load_spec(fixture_path("S1"))
    spec["Phi"] = phi
    assert validate_scenario(scenario_from_spec(spec)).ok


def test_phi_violation_names_the_node():
    rep = validate_scenario(load_fixture("invalid/phi_violation"))
    assert not rep.ok
    assert any("ΔA > Φ" in c.detail for c in rep.failures())


def test_broken_kernel_rejected_on_load():
    with pytest.raises(TreeError, match="node 0: kernel not a probability"):
        load_fixture("invalid/broken_kernel")


def test_non_martingale_x_form_flagged():
    spec = load_spec(fixture_path("S3_X_square"))
    spec["generator"] = {"family": "affine", "eta": [0.2]}
    rep = validate_scenario(scenario_from_spec(spec))
    assert not rep.ok
    assert any("non-martingale" in c.detail for c in rep.failures())


@pytest.mark.parametrize("name", ["S1", "S2", "S3", "S3_intrinsic", "common_pi", "control_tilt"])
def test_suites_pass_on_fixtures(name):
    results = run_suites(load_fixture(name), SUITES, seed=1)
    failed = [(r.suite, r.name, r.value, r.detail) for r in results if r.failed]
    assert not failed


def test_random_suites_are_seeded():
    a = run_random(1, 7, ("lattice", "bsde"))
    b = run_random(1, 7, ("lattice", "bsde"))
    assert [r.as_dict() for r in a[0][1]] == [r.as_dict() for r in b[0][1]]
    assert not any(r.failed for r in a[0][1])


def test_random_spec_shapes(rng):
    spec = random_spec(rng, horizon=2, n_kernels=2, form="X", d=2, generator="affine")
    sc = scenario_from_spec(spec)
    assert sc.tree.dim == 2 and sc.form == "X"
    assert all(sc.family.count(v) == 2 for v in sc.tree.internal)
    assert validate_scenario(random_scenario(rng, max_pastings=64)).ok


def test_report_round_trip(s2):
    sol = solve_bsde(s2)
    payload = solution_payload(sol, beta=5.0)
    again = solution_from_payload(s2, payload)
    np.testing.assert_allclose(again.Y, sol.Y)
    assert all(ok for _, ok, _ in replay_checks(again))


def test_report_is_json_safe():
    text = dumps(envelope("x", {"a": float("nan"), "b": float("inf"), "c": np.float64(1.5)}, seed=1))
    assert '"a": null' in text and '"b": "inf"' in text and '"c": 1.5' in text
