"""Invariant suites per module, run against a scenario."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import bsde as bs
from . import calculus
from . import control as ct
from . import twobsde as tb
from .generators import AffineGenerator, ZeroGenerator
from .lattice import (CapExceeded, conditional_expectation, count_pastings, count_stopping_times, enumerate_pastings,
                      enumerate_stopping_times, expectation_from, node_probabilities, paste, restrict_selection)
from .randomized import ordered_pair, perturbed_pair, random_scenario
from .scenario import Scenario, shift_scenario

SUITES = ("lattice", "calculus", "bsde", "twobsde", "control")
ENUM_CAP = 4096
STOP_PAIR_CAP = 20000


@dataclass
class CheckResult:
    suite: str
    name: str
    status: str  # pass, fail or skip
    value: float = 0.0
    tol: float = 0.0
    detail: str = ""

    @property
    def failed(self) -> bool:
        return self.status == "fail"

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _check(suite: str, name: str, value: float, tol: float, detail: str = "") -> CheckResult:
    ok = bool(np.isfinite(value)) and value <= tol
    return CheckResult(suite, name, "pass" if ok else "fail", float(value), tol, detail)


def _skip(suite: str, name: str, why: str) -> CheckResult:
    return CheckResult(suite, name, "skip", detail=why)


def _flag(suite: str, name: str, ok: bool, detail: str = "") -> CheckResult:
    return CheckResult(suite, name, "pass" if ok else "fail", 0.0 if ok else 1.0, 0.0, detail)


# --- lattice ---------------------------------------------------------------------------------------------


def lattice_suite(sc: Scenario, rng: np.random.Generator) -> list[CheckResult]:
    S = "lattice"
    tree = sc.tree
    sel = sc.default_selection()
    w = sc.weights(sel)
    out = []
    h = sc.payoff
    worst = 0.0
    for t in range(tree.horizon - 1):
        one = conditional_expectation(tree, w, h, tree.horizon - 1)
        step = np.array(h, dtype=float)
        step[tree.level(tree.horizon - 1)] = one[tree.level(tree.horizon - 1)]
        for s in range(tree.horizon - 2, t - 1, -1):
            ce = conditional_expectation(tree, w, step, s)
            step[tree.level(s)] = ce[tree.level(s)]
        for v in tree.level(t):
            worst = max(worst, abs(step[v] - expectation_from(tree, w, h, v)))
    out.append(_check(S, "tower property", worst, 1e-12))
    total = sum(node_probabilities(tree, w)[v] for v in tree.leaves)
    out.append(_check(S, "leaf probabilities sum to one", abs(total - 1.0), 1e-12))
    if count_pastings(tree, sc.family) <= ENUM_CAP:
        all_sel = set(enumerate_pastings(tree, sc.family, cap=ENUM_CAP))
        missing = 0
        pool = list(all_sel)
        for _ in range(20):
            a = pool[int(rng.integers(len(pool)))]
            b = pool[int(rng.integers(len(pool)))]
            switch = [v for v in tree.internal if rng.random() < 0.5]
            missing += paste(tree, a, b, switch) not in all_sel
        out.append(_check(S, "pasting closure", missing, 0))
    else:
        out.append(_skip(S, "pasting closure", "pasting count above cap"))
    worst = 0.0
    for v in tree.internal:
        sub, shift = shift_scenario(sc, v)
        sub_sel = restrict_selection(sel, shift)
        val = expectation_from(sub.tree, sub.weights(sub_sel), sc.payoff[list(shift.to_global)], 0)
        worst = max(worst, abs(val - expectation_from(tree, w, h, v)))
    out.append(_check(S, "shift consistency", worst, 1e-12))
    return out


# --- calculus --------------------------------------------------------------------------------------------


def _random_U(sc: Scenario, sel, rng) -> list:
    return [None if sc.tree.is_leaf(v) else rng.normal(size=sc.law(v, sel[v]).m) for v in range(sc.tree.n_nodes)]


def calculus_suite(sc: Scenario, rng: np.random.Generator, draws: int = 20) -> list[CheckResult]:
    S = "calculus"
    tree = sc.tree
    out = []
    pastings = None
    if count_pastings(tree, sc.family) <= ENUM_CAP:
        pastings = enumerate_pastings(tree, sc.family, cap=ENUM_CAP)
    iso = orth = orth_x = 0.0
    for _ in range(draws):
        sel = pastings[int(rng.integers(len(pastings)))] if pastings else sc.default_selection()
        laws = sc.laws(sel)
        prob = node_probabilities(tree, sc.weights(sel))
        iso_gap, o1, o2 = calculus_draw(sc, sel, laws, prob, rng)
        iso, orth, orth_x = max(iso, iso_gap), max(orth, o1), max(orth_x, o2)
    out.append(_check(S, "isometry", iso, 1e-10))
    out.append(_check(S, "jump orthogonality", orth, 1e-10))
    out.append(_check(S, "X orthogonality", orth_x, 1e-10) if orth_x >= 0 else _skip(S, "X orthogonality", "no martingale law"))
    worst = 0.0
    for _ in range(draws):
        dw = rng.uniform(-0.9, 2.0, size=tree.horizon)
        lhs = calculus.stieltjes_exponential(dw) ** 2
        rhs = calculus.stieltjes_exponential(2 * dw + dw * dw)
        worst = max(worst, float(np.max(np.abs(lhs - rhs) / np.maximum(1.0, np.abs(rhs)))))
    out.append(_check(S, "exponential algebra", worst, 1e-12))
    worst = 0.0
    for _ in range(draws):
        T = tree.horizon
        dA = np.concatenate([[0.0], rng.uniform(0, 0.5, size=T)])
        dV = np.concatenate([[0.0], rng.uniform(0, 1.0, size=T)])
        gamma = float(rng.uniform(0, 5))
        for t in range(T + 1):
            a, b = calculus.fv_exponential_sides(gamma, dA, dV, t)
            worst = max(worst, abs(a - b) / max(1.0, abs(a)))
    out.append(_check(S, "finite-variation exponential identity", worst, 1e-10))
    worst = -math.inf
    for _ in range(max(1, draws // 4)):
        sel = sc.default_selection()
        w = sc.weights(sel)
        dM = np.zeros(tree.n_nodes)
        for v in tree.internal:
            kids = list(tree.children[v])
            raw = rng.uniform(-0.5, 0.5, size=len(kids))
            dM[kids] = raw - float(w[v] @ raw)
        lhs, _, bound = calculus.inverse_exponential_check(tree, w, dM)
        worst = max(worst, float(np.max(lhs - bound)))
    out.append(_check(S, "inverse exponential bound", max(worst, 0.0), 0.0))
    bad = 0.0
    for v in tree.internal:
        for k in range(sc.family.count(v)):
            law = sc.law(v, k)
            bad = max(bad, law.a - 1.0, float(np.max(np.abs(law.pi - law.pi.T))),
                      -float(np.min(np.linalg.eigvalsh(law.pi))))
    out.append(_check(S, "characteristics (a <= 1, pi symmetric PSD)", max(bad, 0.0), 1e-12))
    return out


def calculus_draw(sc: Scenario, sel, laws, prob, rng) -> tuple[float, float, float]:
    """One randomized isometry/orthogonality draw; orth_x is -1 when not applicable."""
    tree = sc.tree
    U = _random_U(sc, sel, rng)
    I = calculus.integral_jump(tree, laws, U)
    lhs = sum(prob[v] * I[v] ** 2 for v in tree.leaves)
    rhs = sum(prob[v] * calculus.lhat_norm_sq(U[v], laws[v]) * laws[v].dc for v in tree.internal)
    iso = abs(lhs - rhs) / max(1.0, abs(rhs))
    w = sc.weights(sel)
    M = np.zeros(tree.n_nodes)
    for v in tree.internal:
        kids = list(tree.children[v])
        raw = rng.normal(size=len(kids))
        M[kids] = M[v] + raw - float(w[v] @ raw)
    Uo, N = calculus.orth_decompose_jump(tree, laws, M)
    U2 = _random_U(sc, sel, rng)
    orth = 0.0
    for v in tree.internal:
        law = laws[v]
        kids = list(tree.children[v])
        dN = N[kids] - N[v]
        for j in range(law.m):
            mask = law.jump_index == j
            orth = max(orth, abs(float(law.p[mask] @ dN[mask])))
        orth = max(orth, abs(float(law.p @ (dN * law.compensated(U2[v])))))
    orth_x = -1.0
    if calculus.martingale_law_check([laws[v] for v in tree.internal]):
        Z, Nx = calculus.orth_decompose_X(tree, laws, M)
        orth_x = 0.0
        for v in tree.internal:
            kids = list(tree.children[v])
            dN = Nx[kids] - Nx[v]
            orth_x = max(orth_x, float(np.max(np.abs(laws[v].p @ (dN[:, None] * tree.jump[kids])))))
    return iso, orth, orth_x


# --- bsde --------------------------------------------------------------------------------------------------


def _linear_generator(sc: Scenario) -> AffineGenerator | None:
    tree = sc.tree
    n = tree.n_nodes
    zeros = np.zeros(n)
    if sc.form == "jump":
        rho = [None if tree.is_leaf(v) else 0.2 * calculus.jump_support(tree.jump[list(tree.children[v])])[0][:, 0]
               for v in range(n)]
        return AffineGenerator(zeros, zeros, zeros, np.zeros((n, tree.dim)), rho)
    return AffineGenerator(zeros, zeros, zeros, np.full((n, tree.dim), 0.2), [None] * n)


def bsde_suite(sc: Scenario, rng: np.random.Generator) -> list[CheckResult]:
    S = "bsde"
    tree = sc.tree
    sel = sc.default_selection()
    out = []
    zero = bs.solve_bsde_picard(sc, sel, ZeroGenerator())
    chain = bs.conditional_chain(sc, sel)
    out.append(_check(S, "zero-generator reduction", float(np.nanmax(np.abs(zero.Y - chain))), 1e-12))
    step = bs.solve_bsde_stepwise(sc, sel)
    pic = bs.solve_bsde_picard(sc, sel)
    out.append(_check(S, "dynamics residual (stepwise)", step.residual, 1e-10))
    out.append(_check(S, "dynamics residual (Picard)", pic.residual, 1e-10))
    out.append(_check(S, "stepwise agrees with Picard", float(np.nanmax(np.abs(step.Y - pic.Y))), 1e-10))
    bound = bs.contraction_bound(pic)
    top = max(pic.ratios, default=0.0)
    out.append(_check(S, "Picard contraction ratio", top - bound, 0.05,
                      f"max ratio {top:.4g}, {pic.variant}({pic.beta_hat:.4g}) = {bound:.4g}"))
    if count_stopping_times(tree) <= 2000:
        worst = 0.0
        for tau in enumerate_stopping_times(tree):
            part = bs.solve_bsde_stepwise(sc, sel, payoff=step.Y, stop=tau)
            ok = np.isfinite(part.Y)
            worst = max(worst, float(np.max(np.abs(part.Y[ok] - step.Y[ok]), initial=0.0)))
        out.append(_check(S, "flow property", worst, 1e-10))
    else:
        out.append(_skip(S, "flow property", "stopping-time count above cap"))
    obstacle = sc.obstacle if sc.obstacle is not None else _median_obstacle(sc)
    ref = bs.solve_rbsde(sc, sel, obstacle=obstacle)
    skor = max(abs((ref.Y[v] - obstacle[v]) * ref.dK[v]) for v in tree.internal)
    out.append(CheckResult(S, "Skorokhod condition", "pass" if skor == 0.0 else "fail", float(skor), 0.0))
    out.append(_check(S, "reflected value above obstacle", float(max(0.0, np.nanmax(obstacle - ref.Y))), 1e-12))
    gen = _linear_generator(sc)
    laws = sc.laws(sel)
    if sc.form == "X" and not calculus.martingale_law_check([laws[v] for v in tree.internal]):
        out.append(_skip(S, "Girsanov consistency", "X-form law is not a martingale law"))
    else:
        lin = bs.solve_bsde_picard(sc, sel, gen)
        eta = rho = None
        if sc.form == "jump":
            rho = gen.rho
        else:
            eta = gen.eta
        closed = bs.linear_bsde_closed_form(sc, sel, eta=eta, rho=rho)
        out.append(_check(S, "Girsanov consistency", float(np.nanmax(np.abs(lin.Y - closed))), 1e-10))
    big, small = ordered_pair(rng, sc)
    rep = bs.comparison_check(bs.solve_bsde_stepwise(big, sel), bs.solve_bsde_stepwise(small, sel))
    out.append(_flag(S, "comparison", rep.ok, "" if rep.comparable else rep.reason))
    a, b = perturbed_pair(rng, sc)
    st = bs.stability_bound(bs.solve_bsde_stepwise(a, sel), bs.solve_bsde_stepwise(b, sel), sc.resolved_beta_hat())
    out.append(_flag(S, "stability bound", st.ok, f"constant {st.constant:.4g}"))
    return out


def _median_obstacle(sc: Scenario) -> np.ndarray:
    tree = sc.tree
    obstacle = np.full(tree.n_nodes, float(np.median(sc.payoff[tree.leaves])))
    obstacle[tree.leaves] = np.minimum(obstacle[tree.leaves], sc.payoff[tree.leaves])
    return obstacle


# --- twobsde -----------------------------------------------------------------------------------------------


def twobsde_suite(sc: Scenario, rng: np.random.Generator) -> list[CheckResult]:
    S = "twobsde"
    tree = sc.tree
    out = []
    total = count_pastings(tree, sc.family)
    if total > ENUM_CAP:
        raise CapExceeded("pastings", total, ENUM_CAP)
    vf = tb.value_function(sc)
    oracle = tb.value_function_oracle(sc, cap=ENUM_CAP)
    out.append(_check(S, "DPP against pasting enumeration", float(np.max(np.abs(vf.Y - oracle))), 1e-9))
    members = tb.member_values(sc, cap=ENUM_CAP)
    out.append(_check(S, "aggregation identity", tb.aggregation_identity(sc, vf, members), 1e-9))
    two = tb.decompose(sc, vf)
    out.append(_check(S, "reflected value equals value function", two.max_mismatch, 1e-9))
    neg = max(float(-np.min(m.dK)) for m in two.members.values())
    out.append(_check(S, "K nondecreasing", max(neg, 0.0), 1e-12))
    stops = count_stopping_times(tree)
    pairs = stops * stops * len(two.members)
    if pairs <= STOP_PAIR_CAP:
        st = enumerate_stopping_times(tree)
        worst = max(tb.supermartingale_check(sc, vf, sel, a, b)[1] for sel in two.members for a in st for b in st)
        out.append(_check(S, "nonlinear supermartingale", max(worst, 0.0), 1e-10))
    else:
        out.append(_skip(S, "nonlinear supermartingale", f"{pairs} (selection, sigma, tau) triples above cap"))
    beta_hat = sc.resolved_beta_hat(reflected=True)
    other = tb.decompose(sc, vf, sels=list(two.members), method="picard", beta_hat=2.0 * beta_hat)
    gaps = tb.decomposition_gap(two, other)
    out.append(_check(S, "decomposition uniqueness", max(gaps.values()), 1e-9, str(gaps)))
    if sc.generator.uses_u and not sc.intrinsic:
        out.append(_skip(S, "minimality (plain)", "generator depends on u and no intrinsic data declared"))
    else:
        plain = tb.minimality_plain(sc, vf)
        cross = tb.minimality_plain_oracle(sc, two)
        out.append(_check(S, "minimality (plain)", float(np.max(np.abs(plain))), 1e-9))
        out.append(_check(S, "minimality recursion against enumeration", float(np.max(np.abs(plain - cross))), 1e-9))
    if sc.intrinsic or not sc.generator.uses_u:
        weighted = tb.minimality_weighted(sc, vf, two)
        out.append(_check(S, "minimality (weighted)", float(np.max(np.abs(weighted))), 1e-9))
    worst = max(tb.invariance_check(sc, v, vf=vf).worst for v in tree.internal)
    out.append(_check(S, "invariance", worst, 1e-9))
    link = tb.optimisation_link(sc, vf, cap=ENUM_CAP)
    out.append(_flag(S, "optimisation link", link.ok))
    big, small = ordered_pair(rng, sc)
    gap = tb.compare_value_functions(tb.value_function(big), tb.value_function(small))
    out.append(_check(S, "second-order comparison", gap, 1e-10))
    beta = calculus.smallest_admissible_beta(sc.Phi, calculus.m1_reflected)
    nb = tb.norm_bound_check(sc, vf, two, beta=beta, beta_hat=2.0 * beta)
    out.append(_flag(S, "norm bound", nb.ok, f"lhs {nb.lhs:.4g}, rhs {nb.rhs:.4g}"))
    reg = tb.regularize(tree, vf)
    out.append(_flag(S, "finite down-crossings", reg.max_crossings() <= tree.horizon,
                     f"max crossings {reg.max_crossings()}"))
    agg = tb.aggregation_diagnostic(sc, vf, two)
    out.append(CheckResult(S, "aggregation diagnostic", "pass", agg.residual, 0.0,
                           "aggregable" if agg.aggregable else f"not aggregable, witness node {agg.witness}"))
    return out


# --- control -------------------------------------------------------------------------------------------------


def control_suite(sc: Scenario, rng: np.random.Generator) -> list[CheckResult]:
    S = "control"
    if sc.control is None:
        return [_skip(S, "control", "scenario has no control block")]
    spec = sc.control
    tree = sc.tree
    gen = ct.hamiltonian_generator(spec, sc.generator.overrides, sc.generator.alpha2_floor)
    out = []
    sel = sc.default_selection()
    sol = bs.solve_bsde_stepwise(sc, sel, gen)
    val, pol = ct.enumerate_policies_oracle(sc, sel, spec, cap=10**5)
    out.append(_check(S, "verification against policy enumeration", abs(sol.y0() - val), 1e-9))
    best = ct.extract_optimal_policy(sol, spec)
    tilt = ct.discounted_payoff(sc, sel, best, spec)
    dens = ct.discounted_payoff(sc, sel, best, spec, route="density")
    out.append(_check(S, "tilt and density routes agree", abs(tilt - dens), 1e-10))
    out.append(_check(S, "extracted policy attains the optimum", abs(tilt - val), 1e-9))
    c = float(rng.uniform(0.1, 1.0))
    shifted = spec.with_reward_shift(c)
    sol2 = bs.solve_bsde_stepwise(sc, sel, ct.hamiltonian_generator(shifted, sc.generator.overrides,
                                                                     sc.generator.alpha2_floor))
    pol2 = ct.extract_optimal_policy(sol2, shifted)
    flat = replace(spec, reward=np.full_like(spec.reward, c))
    const = ct.discounted_payoff(sc, sel, best, flat, payoff=np.zeros(tree.n_nodes))
    out.append(_flag(S, "policy invariant under reward shift", pol2.actions == best.actions))
    out.append(_check(S, "value shifts by the discounted constant", abs(sol2.y0() - sol.y0() - const), 1e-9))
    n_pairs = count_pastings(tree, sc.family) * ct.count_policies(tree, spec)
    if n_pairs <= 10**5:
        rv = ct.robust_value(sc, spec)
        oval = ct.robust_value_oracle(sc, spec, cap=10**5)[0]
        out.append(_check(S, "robust value against (pasting, policy) enumeration", abs(rv.value - oval), 1e-9))
    else:
        out.append(_skip(S, "robust value against (pasting, policy) enumeration", "pair count above cap"))
    return out


# --- driver ----------------------------------------------------------------------------------------------------


SUITE_FUNCS = {"lattice": lattice_suite, "calculus": calculus_suite, "bsde": bsde_suite,
               "twobsde": twobsde_suite, "control": control_suite}


def run_suites(sc: Scenario, suites=SUITES, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for name in suites:
        out.extend(SUITE_FUNCS[name](sc, rng))
    return out


def run_random(count: int, seed: int, suites=SUITES) -> list[tuple[str, list[CheckResult]]]:
    """Suites on seeded random scenarios; the same seed always yields the same instances."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        sc = random_scenario(rng, max_pastings=64)
        sc.name = f"random-{seed}-{i}"
        out.append((sc.name, run_suites(sc, [s for s in suites if s != "control"], seed + i + 1)))
    return out
