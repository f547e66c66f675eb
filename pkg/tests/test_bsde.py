import numpy as np
import pytest
from hypothesis import given, strategies as st

from treebsde.bsde import (comparison_check, conditional_chain, contraction_bound, dynamics_residual,
                           linear_bsde_closed_form, solve_bsde, solve_bsde_picard, solve_bsde_stepwise,
                           solve_rbsde, stability_bound, weighted_norms)
from treebsde.calculus import smallest_admissible_beta, m1_reflected
from treebsde.generators import generator_from_spec
from treebsde.lattice import enumerate_stopping_times
from treebsde.randomized import ordered_pair, perturbed_pair, random_scenario

from conftest import node


def test_zero_generator_is_identity(s1):
    sol = solve_bsde_picard(s1)
    np.testing.assert_allclose(sol.Y, s1.tree.X[:, 0], atol=1e-15)
    for v in s1.tree.internal:
        law = s1.law(v, 0)
        np.testing.assert_allclose(sol.U[v], law.support[:, 0], atol=1e-14)
    np.testing.assert_allclose(sol.N, 0.0, atol=1e-14)
    assert sol.iterations <= 2


def test_constant_generator(s1):
    gen = generator_from_spec(s1.tree, {"family": "zero", "intercept": 0.1})
    for method in ("picard", "stepwise"):
        sol = solve_bsde(s1, gen=gen, method=method)
        expected = s1.tree.X[:, 0] + 0.1 * (2 - s1.tree.time)
        np.testing.assert_allclose(sol.Y, expected, atol=1e-12)
    assert sol.y0() == pytest.approx(0.2, abs=1e-12)


def test_linear_in_u(s1):
    gen = generator_from_spec(s1.tree, {"family": "affine", "rho": {"linear": 0.5}})
    picard = solve_bsde_picard(s1, gen=gen)
    sel = s1.default_selection()
    rho = [None if law is None else 0.5 * law.support[:, 0] for law in s1.laws(sel)]
    closed = linear_bsde_closed_form(s1, sel, rho=rho)
    assert picard.y0() == pytest.approx(1.0, abs=1e-10)
    np.testing.assert_allclose(picard.Y, closed, atol=1e-10)


def test_closed_form_trivial_cases(s2):
    sel = s2.default_selection()
    np.testing.assert_allclose(linear_bsde_closed_form(s2, sel), conditional_chain(s2, sel), atol=1e-15)
    const = np.full(s2.tree.n_nodes, 3.0)
    np.testing.assert_allclose(linear_bsde_closed_form(s2, sel, zeta=const), 3.0)


def test_ybar_recursion(s1):
    gen = generator_from_spec(s1.tree, {"family": "affine", "ybar": -0.3})
    assert solve_bsde_stepwise(s1, gen=gen).y0() == pytest.approx(0.0, abs=1e-14)
    sol = solve_bsde_stepwise(s1, gen=gen, payoff=s1.payoff + 1.0)
    assert sol.y0() == pytest.approx(1 / 1.69, abs=1e-12)
    assert solve_bsde_picard(s1, gen=gen, payoff=s1.payoff + 1.0).y0() == pytest.approx(1 / 1.69, abs=1e-10)


def test_reflection_identity_obstacle(s1):
    sol = solve_rbsde(s1, obstacle=s1.tree.X[:, 0])
    np.testing.assert_allclose(sol.Y, s1.tree.X[:, 0], atol=1e-15)
    assert np.all(sol.K == 0)


def test_reflection_constant_obstacle(s1):
    sol = solve_rbsde(s1, obstacle=0.5)
    # the down node is lifted to 0.5, so the root sees (1 + 0.5) / 2
    assert sol.y0() == pytest.approx(0.75, abs=1e-15)
    assert sol.dK[node(s1.tree, "0.1")] == pytest.approx(1.5)
    assert sol.dK[0] == 0.0


def test_reflection_root_only(s1):
    L = np.full(s1.tree.n_nodes, -np.inf)
    L[0] = 0.5
    sol = solve_rbsde(s1, obstacle=L)
    assert sol.y0() == 0.5
    assert sol.dK[0] == pytest.approx(0.5)


def test_reflection_without_obstacle_is_plain(s2):
    assert s2.obstacle is None
    np.testing.assert_array_equal(solve_rbsde(s2).Y, solve_bsde(s2).Y)


def test_obstacle_above_payoff_rejected(s1):
    with pytest.raises(ValueError, match="obstacle above terminal payoff"):
        solve_rbsde(s1, obstacle=np.full(s1.tree.n_nodes, 0.5))


def test_skorokhod_exact(s2):
    L = np.where(s2.tree.time < 2, 0.3, -5.0)
    for method in ("stepwise", "picard"):
        sol = solve_rbsde(s2, obstacle=L, method=method)
        assert np.all(sol.Y[s2.tree.internal] >= L[s2.tree.internal])
        for v in s2.tree.internal:
            assert (sol.Y[v] - L[v]) * sol.dK[v] == 0.0
        assert np.all(sol.dK >= 0)


def test_weighted_norms_examples(s1):
    sol = solve_bsde(s1)
    norms = weighted_norms(sol, 0.0)
    assert norms["S2"] == pytest.approx(2.5)  # E sup |X|^2 over four paths
    doubled = solve_bsde(s1, payoff=2 * s1.payoff)
    for key, val in weighted_norms(doubled, 3.0).items():
        assert val == pytest.approx(4 * weighted_norms(sol, 3.0)[key])
    zero = solve_bsde(s1, payoff=np.zeros(s1.tree.n_nodes))
    assert all(v == 0 for v in weighted_norms(zero, 5.0).values())


def test_comparison_examples(s1):
    base = solve_bsde(s1)
    shifted = solve_bsde(s1, gen=s1.generator.with_intercept(0.1))
    rep = comparison_check(shifted, base)
    assert rep.ok
    np.testing.assert_allclose(shifted.Y - base.Y, 0.1 * (2 - s1.tree.time), atol=1e-14)
    assert comparison_check(base, base).max_violation == 0.0
    lower = solve_bsde(s1, payoff=s1.payoff - 1)
    np.testing.assert_allclose(base.Y - lower.Y, 1.0, atol=1e-14)


def test_comparison_not_comparable(s1):
    rep = comparison_check(solve_bsde(s1, payoff=s1.payoff - 1), solve_bsde(s1))
    assert not rep.comparable and "not ordered" in rep.reason


def test_stability_identical(s1):
    sol = solve_bsde(s1)
    rep = stability_bound(sol, sol, 20.0)
    assert rep.ok and np.all(rep.lhs == 0) and rep.sup_lhs == 0


def test_stability_terminal_perturbation(s1):
    eps = 0.1
    a = solve_bsde(s1)
    b = solve_bsde(s1, payoff=s1.payoff + eps)
    rep = stability_bound(a, b, 20.0)
    assert rep.ok and np.isfinite(rep.constant)
    # zero generator: A does not move, so the weight is 1 and dY = eps
    assert rep.lhs[0] == pytest.approx(eps**2)
    assert rep.lhs[0] <= rep.constant * eps**2 + 1e-12


def test_flow_property(s2):
    gen = generator_from_spec(s2.tree, {"family": "affine", "intercept": 0.2, "y": -0.1, "rho": {"linear": 0.2}})
    full = solve_bsde(s2, gen=gen)
    for stop in enumerate_stopping_times(s2.tree):
        part = solve_bsde(s2, gen=gen, payoff=full.Y, stop=stop)
        mask = np.isfinite(part.Y)
        assert np.max(np.abs(part.Y[mask] - full.Y[mask])) <= 1e-10


def test_max_iter_failure_reports(s2):
    from treebsde.bsde import SolverError
    gen = generator_from_spec(s2.tree, {"family": "affine", "y": 0.3, "intercept": 0.5})
    with pytest.raises(SolverError, match="ratio"):
        solve_bsde_picard(s2, gen=gen, max_iter=1, tol=1e-30)


@given(st.integers(0, 10**6))
def test_random_stepwise_matches_picard(seed):
    rng = np.random.default_rng(seed)
    sc = random_scenario(rng, max_pastings=256)
    sel = sc.default_selection()
    a = solve_bsde_stepwise(sc, sel)
    b = solve_bsde_picard(sc, sel)
    assert np.max(np.abs(a.Y - b.Y)) <= 1e-8
    assert dynamics_residual(a) <= 1e-10 and dynamics_residual(b) <= 1e-10
    for r in b.ratios:
        assert r <= contraction_bound(b) + 0.05


@given(st.integers(0, 10**6))
def test_random_zero_generator(seed):
    rng = np.random.default_rng(seed)
    sc = random_scenario(rng, generator="zero", max_pastings=256)
    sel = sc.default_selection()
    sol = solve_bsde_picard(sc, sel)
    assert np.max(np.abs(sol.Y - conditional_chain(sc, sel))) <= 1e-12


@given(st.integers(0, 10**6))
def test_random_comparison(seed):
    rng = np.random.default_rng(seed)
    sc = random_scenario(rng, max_pastings=256)
    big, small = ordered_pair(rng, sc)
    sel = sc.default_selection()
    rep = comparison_check(solve_bsde(big, sel), solve_bsde(small, sel))
    assert rep.comparable and rep.ok


@given(st.integers(0, 10**6))
def test_random_stability(seed):
    rng = np.random.default_rng(seed)
    sc = random_scenario(rng, max_pastings=256)
    a, b = perturbed_pair(rng, sc)
    sel = sc.default_selection()
    beta = smallest_admissible_beta(sc.Phi, m1_reflected)
    assert stability_bound(solve_bsde(a, sel), solve_bsde(b, sel), beta).ok
