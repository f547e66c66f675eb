import numpy as np
import pytest
from hypothesis import given, strategies as st

from treebsde.lattice import (CapExceeded, TreeError, build_tree, conditional_expectation, constant_selection,
                              count_pastings, count_stopping_times, enumerate_pastings, enumerate_stopping_times,
                              expectation_from, is_stopping_time, make_family, paste, restrict_selection,
                              shift_subtree, stop_minimum, constant_stopping_time)
from treebsde.scenario import evaluate_payoff, shift_scenario


def binomial(horizon=2):
    return build_tree({"horizon": horizon, "branches": [1.0, -1.0]})


def test_s1_tree_shape(s1):
    tree = s1.tree
    assert tree.n_nodes == 7
    assert sorted(tree.X[tree.leaves, 0].tolist()) == [-2.0, 0.0, 0.0, 2.0]


def test_s2_has_13_nodes(s2):
    assert s2.tree.n_nodes == 13


def test_early_leaf_rejected():
    records = [{"id": "r", "parent": None, "jump": [0.0]},
               {"id": "a", "parent": "r", "jump": [1.0]},
               {"id": "b", "parent": "r", "jump": [-1.0]},
               {"id": "c", "parent": "a", "jump": [1.0]}]
    with pytest.raises(TreeError, match="b"):
        build_tree({"nodes": records, "horizon": 2})


def test_conditional_expectation_fair(s1):
    tree = s1.tree
    w = s1.weights(s1.default_selection())
    ce = conditional_expectation(tree, w, tree.X[:, 0], 1)
    for v in tree.level(1):
        assert ce[v] == pytest.approx(tree.X[v, 0], abs=1e-15)


def test_conditional_expectation_tilted():
    tree = binomial()
    fam = make_family(tree, default=[[0.6, 0.4]])
    w = [None if tree.is_leaf(v) else fam.weights(v, 0) for v in range(tree.n_nodes)]
    ce = conditional_expectation(tree, w, tree.X[:, 0], 1)
    for v in tree.level(1):
        assert ce[v] == pytest.approx(tree.X[v, 0] + 0.2, abs=1e-15)


def test_conditional_expectation_constant(s2):
    w = s2.weights(s2.default_selection())
    ce = conditional_expectation(s2.tree, w, np.full(s2.tree.n_nodes, 3.5), 0)
    assert ce[0] == pytest.approx(3.5, abs=1e-15)


def test_pasting_counts(s1, s3):
    assert len(enumerate_pastings(s3.tree, s3.family)) == 8
    assert len(enumerate_pastings(s1.tree, s1.family)) == 1
    v = s3.tree.level(1)[0]
    assert len(enumerate_pastings(s3.tree, s3.family, root=v)) == 2


def test_pasting_cap(s3):
    with pytest.raises(CapExceeded, match="8"):
        enumerate_pastings(s3.tree, s3.family, cap=7)


def test_shift_root_is_identity(s1):
    sub, shift = shift_subtree(s1.tree, 0)
    assert shift.to_global == tuple(range(s1.tree.n_nodes))
    np.testing.assert_array_equal(sub.X, s1.tree.X)


def test_shift_time_one_node(s1):
    v = s1.tree.labels.index("0.0")
    sub, shift = shift_subtree(s1.tree, v)
    assert sub.horizon == 1 and sub.n_nodes == 3
    assert sorted(sub.X[sub.leaves, 0].tolist()) == [-1.0, 1.0]
    assert shift.time_offset == 1 and shift.x_offset[0] == 1.0


def test_shifted_payoff(s1):
    v = s1.tree.labels.index("0.0")
    sub, shift = shift_scenario(s1, v)
    for j in sub.tree.leaves:
        assert sub.payoff[j] == pytest.approx(1.0 + sub.tree.X[j, 0])


def test_stopping_time_counts():
    assert count_stopping_times(binomial(1)) == 2
    assert len(enumerate_stopping_times(binomial(1))) == 2
    assert count_stopping_times(binomial(2)) == 5
    assert count_stopping_times(build_tree({"horizon": 2, "branches": [1.0, 0.0, -1.0]})) == 9


def test_constant_stopping_times_present(s2):
    taus = enumerate_stopping_times(s2.tree)
    assert constant_stopping_time(s2.tree, 0) in taus
    assert constant_stopping_time(s2.tree, 2) in taus
    assert all(is_stopping_time(s2.tree, t) for t in taus)


def test_stop_minimum_is_stopping_time(s1):
    taus = enumerate_stopping_times(s1.tree)
    for a in taus:
        for b in taus:
            m = stop_minimum(s1.tree, a, b)
            assert is_stopping_time(s1.tree, m)
            assert stop_minimum(s1.tree, a, a) == a


@st.composite
def trees_and_families(draw):
    horizon = draw(st.integers(1, 4 if draw(st.booleans()) else 2))
    m = draw(st.integers(2, 3)) if horizon <= 2 else 2
    branches = draw(st.lists(st.sampled_from([-1.0, -0.5, 0.0, 0.5, 1.0]), min_size=m, max_size=m, unique=True))
    tree = build_tree({"horizon": horizon, "branches": branches})
    kernels = []
    for _ in range(draw(st.integers(1, 2))):
        raw = np.array(draw(st.lists(st.floats(0.1, 1.0), min_size=m, max_size=m)))
        kernels.append((raw / raw.sum()).tolist())
    fam = make_family(tree, default=kernels)
    seed = draw(st.integers(0, 2**16))
    return tree, fam, seed


@given(trees_and_families())
def test_tower_property(data):
    tree, fam, seed = data
    rng = np.random.default_rng(seed)
    sel = tuple(-1 if tree.is_leaf(v) else int(rng.integers(fam.count(v))) for v in range(tree.n_nodes))
    w = [None if tree.is_leaf(v) else fam.weights(v, sel[v]) for v in range(tree.n_nodes)]
    h = rng.normal(size=tree.n_nodes)
    N = tree.horizon
    step = h.copy()
    for t in range(N - 1, -1, -1):
        ce = conditional_expectation(tree, w, step, t)
        step[tree.level(t)] = ce[tree.level(t)]
    for t in range(N):
        for v in tree.level(t):
            assert step[v] == pytest.approx(expectation_from(tree, w, h, v), abs=1e-12)


@given(trees_and_families())
def test_pasting_closure(data):
    tree, fam, seed = data
    if count_pastings(tree, fam) > 4096:
        return
    rng = np.random.default_rng(seed)
    pool = enumerate_pastings(tree, fam)
    members = set(pool)
    for _ in range(10):
        a, b = pool[rng.integers(len(pool))], pool[rng.integers(len(pool))]
        switch = [v for v in tree.internal if rng.random() < 0.4]
        assert paste(tree, a, b, switch) in members


@given(trees_and_families())
def test_shift_consistency(data):
    tree, fam, seed = data
    rng = np.random.default_rng(seed)
    sel = constant_selection(tree, fam)
    w = [None if tree.is_leaf(v) else fam.weights(v, 0) for v in range(tree.n_nodes)]
    h = rng.normal(size=tree.n_nodes)
    for v in tree.internal:
        sub, shift = shift_subtree(tree, v)
        ws = [w[g] for g in shift.to_global]
        val = expectation_from(sub, ws, h[list(shift.to_global)], 0)
        assert val == pytest.approx(expectation_from(tree, w, h, v), abs=1e-12)
        assert restrict_selection(sel, shift)[0] == sel[v]


def test_evaluate_payoff_kinds(s1):
    tree = s1.tree
    sq = evaluate_payoff(tree, {"kind": "square"})
    call = evaluate_payoff(tree, {"kind": "call", "strike": 1.0})
    assert sorted(sq[tree.leaves].tolist()) == [0.0, 0.0, 4.0, 4.0]
    assert sorted(call[tree.leaves].tolist()) == [0.0, 0.0, 0.0, 1.0]
