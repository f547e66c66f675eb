import numpy as np
import pytest
from hypothesis import given, strategies as st

from treebsde.bsde import solve_bsde_stepwise
from treebsde.control import (Policy, count_policies, discounted_payoff, enumerate_policies_oracle,
                              extract_optimal_policy, hamiltonian_generator, robust_value, robust_value_oracle)
from treebsde.scenario import fixture_path, load_fixture, load_spec, scenario_from_spec

CONTROL_FIXTURES = ("control_tilt", "control_dominance", "control_discount")


def solve_control(sc):
    gen = hamiltonian_generator(sc.control)
    sel = sc.default_selection()
    return solve_bsde_stepwise(sc, sel, gen), sel


def constant_policy(sc, a):
    return tuple(-1 if sc.tree.is_leaf(v) else a for v in range(sc.tree.n_nodes))


def robust_spec(discount=0.0):
    # trinomial family: the zero jump absorbs the mass moved by the tilts
    spec = load_spec(fixture_path("control_discount"))
    spec["kernels"] = {"default": [[0.25, 0.5, 0.25], [0.35, 0.45, 0.2]]}
    spec["control"]["discount"] = discount
    return scenario_from_spec(spec)


def test_tilt_example():
    sc = load_fixture("control_tilt")
    sol, sel = solve_control(sc)
    assert sol.y0() == pytest.approx(1.0, abs=1e-12)
    policy = extract_optimal_policy(sol)
    assert set(policy.names(sc.tree).values()) == {"+"}
    value, best = enumerate_policies_oracle(sc, sel)
    assert value == pytest.approx(1.0, abs=1e-12) and best.actions == policy.actions


def test_dominance_example():
    sc = load_fixture("control_dominance")
    sol, sel = solve_control(sc)
    assert sol.y0() == pytest.approx(0.2, abs=1e-12)
    assert set(extract_optimal_policy(sol).names(sc.tree).values()) == {"b"}
    np.testing.assert_allclose(sol.Y, 0.1 * (2 - sc.tree.time), atol=1e-14)


def test_discount_example():
    sc = load_fixture("control_discount")
    sol, sel = solve_control(sc)
    value, best = enumerate_policies_oracle(sc, sel)
    assert sol.y0() == pytest.approx(value, abs=1e-9)
    assert discounted_payoff(sc, sel, extract_optimal_policy(sol)) == pytest.approx(value, abs=1e-9)


def test_discounted_payoff_examples():
    sc = load_fixture("control_discount")
    sel = sc.default_selection()
    hold = constant_policy(sc, 0)
    ones = np.ones(sc.tree.n_nodes)
    spec = sc.control.with_reward_shift(-0.05)  # hold then has no reward
    assert discounted_payoff(sc, sel, hold, spec, payoff=ones) == pytest.approx(1 / 1.21, abs=1e-15)
    tilt = load_fixture("control_tilt")
    assert discounted_payoff(tilt, tilt.default_selection(), constant_policy(tilt, 0)) == pytest.approx(1.0)
    neutral = load_fixture("control_dominance")
    assert discounted_payoff(neutral, neutral.default_selection(), constant_policy(neutral, 0)) == 0.0


def test_routes_agree():
    for name in CONTROL_FIXTURES:
        sc = load_fixture(name)
        sel = sc.default_selection()
        for a in range(sc.control.n_actions):
            pol = constant_policy(sc, a)
            assert discounted_payoff(sc, sel, pol, route="tilt") == pytest.approx(
                discounted_payoff(sc, sel, pol, route="density"), abs=1e-12)


def test_single_action_is_affine():
    spec = load_spec(fixture_path("control_tilt"))
    spec["control"]["actions"] = spec["control"]["actions"][:1]
    sc = scenario_from_spec(spec)
    assert count_policies(sc.tree, sc.control) == 1
    sol, sel = solve_control(sc)
    assert sol.y0() == pytest.approx(enumerate_policies_oracle(sc, sel)[0], abs=1e-12)
    assert sol.y0() == pytest.approx(1.0)


def test_reward_shift_moves_value_not_policy():
    sc = load_fixture("control_discount")
    sol, sel = solve_control(sc)
    shifted = solve_bsde_stepwise(sc, sel, hamiltonian_generator(sc.control.with_reward_shift(0.1)))
    assert extract_optimal_policy(shifted).actions == extract_optimal_policy(sol).actions


def test_robust_value_matches_oracle():
    for discount in (0.0, 0.1):
        sc = robust_spec(discount)
        rv = robust_value(sc)
        value, sel, pol = robust_value_oracle(sc)
        assert rv.value == pytest.approx(value, abs=1e-9)


def test_robust_single_kernel_reduces():
    sc = load_fixture("control_tilt")
    rv = robust_value(sc)
    value, _ = enumerate_policies_oracle(sc, sc.default_selection())
    assert rv.value == pytest.approx(value) and rv.per_measure_policies_agree


def test_policy_labels():
    sc = load_fixture("control_dominance")
    pol = Policy(constant_policy(sc, 1), sc.control.labels)
    assert pol.names(sc.tree) == {"0": "b", "0.0": "b", "0.1": "b"}


@given(st.floats(0.0, 0.3), st.floats(0.0, 0.2), st.floats(-1.0, 1.0))
def test_random_control_verification(discount, reward, strike):
    spec = load_spec(fixture_path("control_discount"))
    spec["control"]["discount"] = discount
    spec["control"]["actions"][0]["reward"] = reward
    spec["payoff"] = {"kind": "call", "strike": strike}
    sc = scenario_from_spec(spec)
    sol, sel = solve_control(sc)
    value, _ = enumerate_policies_oracle(sc, sel)
    assert sol.y0() == pytest.approx(value, abs=1e-9)
    assert discounted_payoff(sc, sel, extract_optimal_policy(sol)) == pytest.approx(value, abs=1e-9)
