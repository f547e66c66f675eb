"""Robust control on a tree: Hamiltonian generators, control tilts and policy oracles."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace

import numpy as np

from .calculus import LocalLaw, TiltError
from .generators import HamiltonianGenerator, jump_map, node_values, node_vectors
from .lattice import CapExceeded, FilteredTree, Selection, Shift, enumerate_pastings

DEFAULT_POLICY_CAP = 10**6


@dataclass(frozen=True)
class ControlSpec:
    labels: tuple[str, ...]
    reward: np.ndarray  # (A, n) running reward on the parent node
    gamma: tuple  # [A][n] jump tilt on the support, None at leaves
    drift: np.ndarray  # (A, n, d) drift tilt (X-form)
    discount: np.ndarray  # (n,)
    dc_of_node: np.ndarray  # (n,)
    mode: str = "sup"

    @property
    def n_actions(self) -> int:
        return len(self.labels)

    def restrict(self, shift: Shift) -> "ControlSpec":
        idx = list(shift.to_global)
        return replace(self, reward=self.reward[:, idx], gamma=tuple(tuple(row[g] for g in idx) for row in self.gamma),
                       drift=self.drift[:, idx], discount=self.discount[idx], dc_of_node=self.dc_of_node[idx])

    def with_reward_shift(self, c: float) -> "ControlSpec":
        return replace(self, reward=self.reward + c)


def control_spec_from_dict(tree: FilteredTree, spec: dict, dc_of_node: np.ndarray) -> ControlSpec:
    actions = spec.get("actions") or []
    if not actions:
        raise ValueError("control block needs at least one action")
    labels = tuple(str(a.get("label", i)) for i, a in enumerate(actions))
    if len(set(labels)) != len(labels):
        raise ValueError("control labels must be distinct")
    reward = np.array([node_values(tree, a.get("reward", 0.0)) for a in actions])
    gamma = tuple(tuple(jump_map(tree, a.get("gamma"), neutral=1.0)) for a in actions)
    drift = np.array([node_vectors(tree, a.get("drift")) for a in actions])
    discount = node_values(tree, spec.get("discount", 0.0))
    if np.any(discount * dc_of_node <= -1):
        raise ValueError("discount rate must satisfy d dc > -1")
    for row in gamma:
        for g in row:
            if g is not None and np.any(np.asarray(g) < 0):
                raise ValueError("jump tilts must be nonnegative")
    mode = spec.get("mode", "sup")
    if mode not in ("sup", "inf"):
        raise ValueError("control mode must be 'sup' or 'inf'")
    return ControlSpec(labels, reward, gamma, drift, discount, np.asarray(dc_of_node, dtype=float), mode)


def hamiltonian_generator(spec: ControlSpec, overrides: dict | None = None, alpha2_floor: float = 0.0) -> HamiltonianGenerator:
    """Extremum over controls of g - d/(1 + d dc) y + z'pi drift + <u, (gamma - 1) k>."""
    return HamiltonianGenerator(spec.labels, spec.reward, [list(r) for r in spec.gamma], spec.drift, spec.discount,
                                spec.dc_of_node, spec.mode, overrides, alpha2_floor)


def control_factors(law: LocalLaw, spec: ControlSpec, a: int, form: str = "jump") -> np.ndarray:
    """Per-child density factor of control ``a`` relative to the base kernel."""
    v = law.node
    if form == "X":
        h = 1.0 + law.x @ spec.drift[a, v]
    else:
        g = spec.gamma[a][v]
        h = np.ones(len(law.p))
        if g is not None and law.m:
            h = law.lift(np.asarray(g, dtype=float))
            rest = law.jump_index < 0
            jump_mass = float(law.p[~rest] @ h[~rest])
            if law.has_rest:
                h[rest] = (1.0 - jump_mass) / (1.0 - law.a)
            elif abs(jump_mass - 1.0) > 1e-12:
                raise TiltError(f"node {v}: control {spec.labels[a]} changes the total mass with no zero jump to absorb it")
    if np.any(h <= 0):
        raise TiltError(f"node {v}: control {spec.labels[a]} gives a nonpositive child weight")
    return h


def tilted_weights(law: LocalLaw, spec: ControlSpec, a: int, form: str = "jump") -> np.ndarray:
    return law.p * control_factors(law, spec, a, form)


@dataclass
class Policy:
    actions: tuple  # per node, -1 at leaves and inactive nodes
    labels: tuple[str, ...]
    gaps: np.ndarray | None = None

    def names(self, tree: FilteredTree) -> dict[str, str]:
        return {tree.labels[v]: self.labels[a] for v, a in enumerate(self.actions) if a >= 0}


def discounted_payoff(sc, sel: Selection, policy, spec: ControlSpec | None = None, payoff=None,
                      route: str = "tilt") -> float:
    """E^{P^alpha}[xi / D_N + sum_r g_{r-1} dc / D_{r-1}] by exact enumeration.

    ``route="tilt"`` walks the tilted kernels; ``route="density"`` weights the
    base measure by the product of the density factors.
    """
    spec = spec or sc.control
    tree = sc.tree
    actions = policy.actions if isinstance(policy, Policy) else tuple(policy)
    xi = sc.payoff if payoff is None else np.asarray(payoff, dtype=float)
    n = tree.n_nodes
    prob = np.zeros(n)
    prob[0] = 1.0
    D = np.ones(n)
    total = 0.0
    for v in range(n):
        if tree.is_leaf(v):
            total += prob[v] * xi[v] / D[v]
            continue
        law = sc.law(v, sel[v])
        a = actions[v]
        total += prob[v] * spec.reward[a, v] * law.dc / D[v]
        h = control_factors(law, spec, a, sc.form)
        step = law.p * h if route == "tilt" else law.p
        for j, c in enumerate(tree.children[v]):
            prob[c] = prob[v] * step[j] * (1.0 if route == "tilt" else h[j])
            D[c] = D[v] * (1.0 + spec.discount[v] * law.dc)
    return float(total)


def extract_optimal_policy(sol, spec: ControlSpec | None = None) -> Policy:
    """Per node, the first control attaining the extremum along the solution."""
    sc = sol.scenario
    spec = spec or sc.control
    gen = sol.generator
    tree = sc.tree
    acts = [-1] * tree.n_nodes
    gaps = np.zeros(tree.n_nodes)
    for v in range(tree.n_nodes):
        if not sol.active[v]:
            continue
        law = sc.law(v, sol.sel[v])
        vals = gen.action_values(law, sol.Z[v], sol.U[v])
        a = gen.best_action(law, sol.Z[v], sol.U[v])
        acts[v] = a
        others = np.delete(vals, a)
        if others.size:
            gaps[v] = (vals[a] - others.max()) if gen.mode == "sup" else (others.min() - vals[a])
        else:
            gaps[v] = math.inf
    return Policy(tuple(acts), spec.labels, gaps)


def count_policies(tree: FilteredTree, spec: ControlSpec) -> int:
    return spec.n_actions ** len(tree.internal)


def enumerate_policies_oracle(sc, sel: Selection, spec: ControlSpec | None = None, payoff=None,
                              cap: int = DEFAULT_POLICY_CAP) -> tuple[float, Policy]:
    """Best discounted payoff over every Markov policy; ties keep the first found."""
    spec = spec or sc.control
    tree = sc.tree
    total = count_policies(tree, spec)
    if total > cap:
        raise CapExceeded("policies", total, cap)
    internal = tree.internal
    best_val, best = None, None
    sign = 1.0 if spec.mode == "sup" else -1.0
    for combo in itertools.product(range(spec.n_actions), repeat=len(internal)):
        acts = [-1] * tree.n_nodes
        for v, a in zip(internal, combo):
            acts[v] = a
        try:
            val = discounted_payoff(sc, sel, acts, spec, payoff)
        except TiltError:
            continue
        if best_val is None or sign * val > sign * best_val + 1e-15:
            best_val, best = val, tuple(acts)
    if best is None:
        raise TiltError("no admissible policy")
    return float(best_val), Policy(best, spec.labels)


@dataclass
class RobustValue:
    value: float
    pasting: Selection
    policy: Policy
    per_measure_policies_agree: bool


def robust_value(sc, spec: ControlSpec | None = None, cap: int = 10**6) -> RobustValue:
    """Value of the second-order problem with the Hamiltonian generator."""
    from .bsde import solve_bsde_stepwise
    from .twobsde import value_function

    spec = spec or sc.control
    gen = hamiltonian_generator(spec, sc.generator.overrides, sc.generator.alpha2_floor)
    vf = value_function(sc, gen)
    sol = solve_bsde_stepwise(sc, vf.argmax, gen)
    policy = extract_optimal_policy(sol, spec)
    agree = True
    if not sc.family.single(sc.tree):
        try:
            for sel in enumerate_pastings(sc.tree, sc.family, cap=min(cap, 4096)):
                other = extract_optimal_policy(solve_bsde_stepwise(sc, sel, gen), spec)
                if other.actions != policy.actions:
                    agree = False
                    break
        except CapExceeded:
            agree = False
    return RobustValue(float(vf.Y[0]), vf.argmax, policy, agree)


def robust_value_oracle(sc, spec: ControlSpec | None = None, cap: int = 10**6) -> tuple[float, Selection, Policy]:
    """Exhaustive optimum over (pasting, policy) pairs: sup over pastings of the policy optimum."""
    spec = spec or sc.control
    pastings = enumerate_pastings(sc.tree, sc.family, cap=cap)
    if len(pastings) * count_policies(sc.tree, spec) > cap:
        raise CapExceeded("pasting-policy pairs", len(pastings) * count_policies(sc.tree, spec), cap)
    best = None
    for sel in pastings:
        val, pol = enumerate_policies_oracle(sc, sel, spec, cap=cap)
        if best is None or val > best[0] + 1e-15:
            best = (val, sel, pol)
    return best
