"""Second-order BSDEs on a tree: value function over a kernel family and its
decomposition under every tested measure."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import calculus
from .bsde import (BsdeSolution, SolverError, exponential_weights, one_step, solve_bsde_stepwise, solve_rbsde,
                   stability_constant, weighted_norms)
from .calculus import TiltError
from .generators import Generator
from .lattice import (FilteredTree, Selection, agrees_before, count_pastings, enumerate_pastings,
                      node_probabilities, random_selection, stop_minimum)
from .scenario import Scenario, shift_scenario

DEFAULT_TEST_CAP = 4096
SAMPLED_PASTINGS = 32
VALUE_TOL = 1e-9


# --- value function -------------------------------------------------------------------------------


@dataclass
class ValueFunction:
    Y: np.ndarray
    argmax: Selection
    candidates: list  # per node, one-step values for every kernel (None at leaves)
    generator: Generator

    def y0(self) -> float:
        return float(self.Y[0])


def _needs_decomposition(sc: Scenario, gen: Generator) -> bool:
    return sc.form == "jump" or gen.uses_z


def value_function(sc: Scenario, gen: Generator | None = None, payoff=None) -> ValueFunction:
    """Backward recursion: the largest one-step value over the node's kernels."""
    gen = gen or sc.generator
    tree = sc.tree
    xi = sc.payoff if payoff is None else np.asarray(payoff, dtype=float)
    Y = np.full(tree.n_nodes, np.nan)
    sel = [-1] * tree.n_nodes
    cands: list = [None] * tree.n_nodes
    dec = _needs_decomposition(sc, gen)
    for v in reversed(range(tree.n_nodes)):
        if tree.is_leaf(v):
            Y[v] = xi[v]
            continue
        kids = list(tree.children[v])
        vals = np.array([one_step(sc.law(v, k), gen, Y[kids], sc.form, None, dec).ybar
                         for k in range(sc.family.count(v))])
        cands[v] = vals
        k = int(np.argmax(vals))
        Y[v], sel[v] = vals[k], k
    return ValueFunction(Y, tuple(sel), cands, gen)


def value_function_oracle(sc: Scenario, gen: Generator | None = None, payoff=None,
                          cap: int = 10**6) -> np.ndarray:
    """At every node, the sup over subtree pastings of the full subtree BSDE value."""
    gen = gen or sc.generator
    tree = sc.tree
    out = np.full(tree.n_nodes, np.nan)
    base = sc if payoff is None else sc.with_payoff(payoff)
    dec = _needs_decomposition(sc, gen)
    for v in range(tree.n_nodes):
        if tree.is_leaf(v):
            out[v] = base.payoff[v]
            continue
        sub, shift = shift_scenario(base, v)
        sub_gen = gen.restrict(shift)
        best = -math.inf
        for sel in enumerate_pastings(sub.tree, sub.family, cap=cap):
            sol = solve_bsde_stepwise(sub, sel, sub_gen, decompose=dec)
            best = max(best, float(sol.Y[0]))
        out[v] = best
    return out


def member_values(sc: Scenario, gen: Generator | None = None, payoff=None, cap: int = 10**6) -> dict:
    """Solution values Y^P at every node, for every pasting P."""
    gen = gen or sc.generator
    dec = _needs_decomposition(sc, gen)
    return {sel: solve_bsde_stepwise(sc, sel, gen, payoff, decompose=dec).Y
            for sel in enumerate_pastings(sc.tree, sc.family, cap=cap)}


def aggregation_identity(sc: Scenario, vf: ValueFunction, members: dict | None = None,
                         tests: list | None = None) -> float:
    """Largest gap between the value and the max of Y^Pbar over Pbar agreeing with P before t."""
    tree = sc.tree
    members = members if members is not None else member_values(sc, vf.generator)
    tests = tests if tests is not None else list(members)
    worst = 0.0
    for P in tests:
        for v in range(tree.n_nodes):
            t = int(tree.time[v])
            best = max(Y[v] for sel, Y in members.items() if agrees_before(tree, P, sel, t))
            worst = max(worst, abs(best - vf.Y[v]))
    return worst


# --- regularisation --------------------------------------------------------------------------------


def down_crossings(values, a: float, b: float) -> int:
    """Number of completed passages from >= b down to <= a."""
    count = 0
    above = False
    for x in values:
        if x >= b:
            above = True
        elif x <= a and above:
            count += 1
            above = False
    return count


@dataclass
class Regularized:
    Y: np.ndarray
    crossings: dict  # (a, b) -> per-path counts

    def max_crossings(self) -> int:
        return max((max(c) for c in self.crossings.values() if c), default=0)


def regularize(tree: FilteredTree, vf: ValueFunction | np.ndarray, levels: int = 3) -> Regularized:
    """Right limits along the grid are the values themselves; report dyadic down-crossings."""
    Y = np.array(vf.Y if isinstance(vf, ValueFunction) else vf, dtype=float)
    paths = [Y[p] for p in tree.paths()]
    lo, hi = math.floor(np.nanmin(Y)), math.ceil(np.nanmax(Y))
    bands: dict = {}
    for k in range(levels + 1):
        h = 2.0**-k
        j = lo / h
        while lo + (j - lo / h) * h < hi:
            a, b = j * h, (j + 1) * h
            bands[(a, b)] = [down_crossings(p, a, b) for p in paths]
            j += 1
    return Regularized(Y, bands)


# --- nonlinear supermartingale property ----------------------------------------------------------------


def supermartingale_check(sc: Scenario, vf: ValueFunction, sel: Selection, sigma: frozenset, tau: frozenset,
                          tol: float = 1e-10) -> tuple[bool, float]:
    """Value at sigma ^ tau dominates the member solution stopped at tau with terminal value Yhat_tau."""
    gen = vf.generator
    sol = solve_bsde_stepwise(sc, sel, gen, payoff=vf.Y, stop=tau, decompose=_needs_decomposition(sc, gen))
    st = stop_minimum(sc.tree, sigma, tau)
    gap = max(float(sol.Y[v] - vf.Y[v]) for v in st)
    return gap <= tol, gap


# --- decomposition --------------------------------------------------------------------------------------


@dataclass
class TwoBsdeSolution:
    scenario: Scenario
    Y: np.ndarray
    members: dict  # selection -> reflected BsdeSolution
    exhaustive: bool
    cap: int
    argmax: Selection
    max_mismatch: float = 0.0

    def solution(self, sel: Selection) -> BsdeSolution:
        return self.members[tuple(sel)]

    def K(self, sel: Selection) -> np.ndarray:
        return self.members[tuple(sel)].K


def tested_pastings(sc: Scenario, argmax: Selection, cap: int = DEFAULT_TEST_CAP, seed: int = 0) -> tuple[list, bool]:
    total = count_pastings(sc.tree, sc.family)
    if total <= cap:
        return enumerate_pastings(sc.tree, sc.family, cap=cap), True
    rng = np.random.default_rng(seed)
    out = [tuple(argmax)]
    while len(out) < 1 + min(SAMPLED_PASTINGS, total - 1):
        s = random_selection(sc.tree, sc.family, rng)
        if s not in out:
            out.append(s)
    return out, False


def decompose(sc: Scenario, vf: ValueFunction, sels: list | None = None, method: str = "stepwise",
              beta_hat: float | None = None, cap: int = DEFAULT_TEST_CAP, seed: int = 0,
              tol: float = VALUE_TOL) -> TwoBsdeSolution:
    """Reflected solve with obstacle Yhat under each tested measure."""
    exhaustive = sels is None
    if sels is None:
        sels, exhaustive = tested_pastings(sc, vf.argmax, cap, seed)
    members = {}
    worst = 0.0
    kw = {"beta_hat": beta_hat} if method == "picard" else {}
    for sel in sels:
        sol = solve_rbsde(sc, sel, vf.generator, obstacle=vf.Y, method=method, **kw)
        gap = np.abs(sol.Y - vf.Y)
        v = int(np.nanargmax(gap))
        if gap[v] > tol:
            raise SolverError(f"reflected value differs from the value function by {gap[v]:.3e} "
                              f"at node {sc.tree.labels[v]} under selection {sel}")
        worst = max(worst, float(np.nanmax(gap)))
        members[tuple(sel)] = sol
    return TwoBsdeSolution(sc, vf.Y.copy(), members, exhaustive, cap, vf.argmax, worst)


def decomposition_gap(a: TwoBsdeSolution, b: TwoBsdeSolution) -> dict[str, float]:
    """Pathwise differences of K and N, L-hat differences of U, pi-weighted Z differences."""
    out = dict(K=0.0, N=0.0, U=0.0, Z=0.0)
    for sel, sa in a.members.items():
        sb = b.members[sel]
        out["K"] = max(out["K"], float(np.max(np.abs(sa.K - sb.K))))
        out["N"] = max(out["N"], float(np.max(np.abs(sa.N - sb.N))))
        for v in range(sa.tree.n_nodes):
            if not sa.active[v]:
                continue
            law = sa.scenario.law(v, sel[v])
            dz = sa.Z[v] - sb.Z[v]
            out["Z"] = max(out["Z"], float(dz @ law.pi @ dz))
            if law.m:
                out["U"] = max(out["U"], math.sqrt(calculus.lhat_norm_sq(sa.U[v] - sb.U[v], law)))
    return out


# --- minimality -----------------------------------------------------------------------------------------


def _k_increment(sc: Scenario, gen: Generator, Y: np.ndarray, v: int, k: int) -> float:
    kids = list(sc.tree.children[v])
    res = one_step(sc.law(v, k), gen, Y[kids], sc.form, float(Y[v]), _needs_decomposition(sc, gen))
    return res.dK


def minimality_plain(sc: Scenario, vf: ValueFunction) -> np.ndarray:
    """Per node, the smallest expected future K-growth over future kernel choices (min-recursion)."""
    tree = sc.tree
    gen = vf.generator
    out = np.zeros(tree.n_nodes)
    for v in reversed(range(tree.n_nodes)):
        if tree.is_leaf(v):
            continue
        kids = list(tree.children[v])
        out[v] = min(_k_increment(sc, gen, vf.Y, v, k) + float(sc.family.weights(v, k) @ out[kids])
                     for k in range(sc.family.count(v)))
    return out


def _conditional_future(tree: FilteredTree, weights, inc_parent: np.ndarray, factor: np.ndarray | None = None):
    """S(v) = inc(v) + sum_c p_c factor_c S(c), zero at leaves."""
    S = np.zeros(tree.n_nodes)
    for v in reversed(range(tree.n_nodes)):
        if tree.is_leaf(v):
            continue
        kids = list(tree.children[v])
        f = np.ones(len(kids)) if factor is None else factor[kids]
        S[v] = inc_parent[v] + float(weights[v] @ (f * S[kids]))
    return S


def minimality_plain_oracle(sc: Scenario, two: TwoBsdeSolution) -> np.ndarray:
    """Same quantity by enumeration over the decomposed measures."""
    tree = sc.tree
    out = np.full(tree.n_nodes, math.inf)
    for sel, sol in two.members.items():
        S = _conditional_future(tree, sc.weights(sel), sol.dK)
        out = np.minimum(out, S)
    out[[v for v in range(tree.n_nodes) if tree.is_leaf(v)]] = 0.0
    return out


def weighted_factors(sc: Scenario, vf: ValueFunction, sol: BsdeSolution, member: BsdeSolution) -> np.ndarray:
    """1 + lambda dc per child, with lambda the y-difference quotient between Yhat and Y^P."""
    tree = sc.tree
    gen = vf.generator
    out = np.ones(tree.n_nodes)
    for v in range(tree.n_nodes):
        if tree.is_leaf(v):
            continue
        law = sc.law(v, sol.sel[v])
        kids = list(tree.children[v])
        y_hat = vf.Y[kids]
        y_p = member.Y[kids]
        f_hat = gen.evaluate(law, y_hat, vf.Y[v], sol.Z[v], sol.U[v])
        f_p = gen.evaluate(law, y_p, vf.Y[v], sol.Z[v], sol.U[v])
        diff = y_hat - y_p
        lam = np.where(diff != 0, (f_hat - f_p) / np.where(diff != 0, diff, 1.0), 0.0)
        fac = 1.0 + lam * law.dc
        if np.any(fac <= 0):
            raise TiltError(f"node {tree.labels[v]}: weight factor {fac.min():.4g} is not positive")
        out[kids] = fac
    return out


def minimality_weighted(sc: Scenario, vf: ValueFunction, two: TwoBsdeSolution) -> np.ndarray:
    """Per node, the smallest exponentially weighted expected K-growth over the tested measures."""
    tree = sc.tree
    out = np.full(tree.n_nodes, math.inf)
    gen = vf.generator
    dec = _needs_decomposition(sc, gen)
    for sel, sol in two.members.items():
        member = solve_bsde_stepwise(sc, sel, gen, decompose=dec)
        fac = weighted_factors(sc, vf, sol, member)
        S = _conditional_future(tree, sc.weights(sel), sol.dK, fac)
        out = np.minimum(out, S)
    out[[v for v in range(tree.n_nodes) if tree.is_leaf(v)]] = 0.0
    return out


@dataclass
class IntrinsicReport:
    representers_ok: bool
    nested_bound: float
    path_integral: float
    continuous_compensator: bool
    details: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def intrinsic_check(sc: Scenario, vf: ValueFunction, two: TwoBsdeSolution, beta: float,
                    delta: float | None = None, Theta: float | None = None) -> IntrinsicReport:
    """Evaluate the sandwich, integrability, path-bound and no-fixed-jump conditions."""
    tree = sc.tree
    gen = vf.generator
    data = sc.intrinsic or {}
    delta = float(data.get("delta", 0.1)) if delta is None else delta
    Theta = float(data.get("Theta", 10.0)) if Theta is None else Theta
    ok = True
    details = []
    any_fixed = False
    for v in tree.internal:
        for k in range(sc.family.count(v)):
            law = sc.law(v, k)
            any_fixed = any_fixed or law.a > 0
            if not law.m:
                continue
            theta_mu = gen.bounds(law).theta_mu
            for ell in gen.u_functionals(law):
                try:
                    rho = calculus.representer(ell, law)
                except TiltError as exc:
                    ok = False
                    details.append(str(exc))
                    continue
                jumps = law.compensated(rho)
                size = float(rho @ law.gram @ rho)
                if not (np.all(jumps > -1 + delta) and np.all(jumps <= Theta) and size <= theta_mu + 1e-12):
                    ok = False
                    details.append(f"node {tree.labels[v]} kernel {k}: jumps {jumps.tolist()}, size {size:.4g}")
    nested = 0.0
    for sel, sol in two.members.items():
        E = exponential_weights(sol, beta)
        root_half = np.sqrt(E)
        prob = node_probabilities(tree, sc.weights(sel))
        acc = np.zeros(tree.n_nodes)
        val = 0.0
        for c in range(1, tree.n_nodes):
            v = int(tree.parent[c])
            acc[c] = acc[v] + root_half[c] * sol.dK[v]
            if tree.is_leaf(c):
                val += prob[c] * acc[c] ** 2
        nested = max(nested, val)
    best = np.zeros(tree.n_nodes)
    for c in range(1, tree.n_nodes):
        v = int(tree.parent[c])
        step = 0.0
        for k in range(sc.family.count(v)):
            law = sc.law(v, k)
            b = gen.bounds(law)
            step = max(step, max(math.sqrt(b.rbar), b.theta_x, b.theta_mu) * law.dc)
        best[c] = best[v] + step
    path_int = float(max(best[v] for v in tree.leaves))
    return IntrinsicReport(ok, nested, path_int, not any_fixed, details)


# --- aggregation diagnostic ---------------------------------------------------------------------------------


@dataclass
class AggregationReport:
    form: str
    aggregable: bool
    residual: float
    witness: str | None
    per_measure: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return dict(form=self.form, aggregable=self.aggregable, residual=self.residual, witness=self.witness)


def aggregation_diagnostic(sc: Scenario, vf: ValueFunction, two: TwoBsdeSolution | None = None,
                           tol: float = 1e-10) -> AggregationReport:
    """Can one integrand represent the whole family?

    X-form: per node, regress the value increment on dX under each tested
    kernel, pool the regressions through the summed second-moment matrices,
    and measure the pi-weighted misfit.  Jump form: look for a node where the
    jump integrands of two tested measures differ in the L-hat norm.
    """
    tree = sc.tree
    if sc.form == "X":
        worst, where = 0.0, None
        for v in tree.internal:
            ks = range(sc.family.count(v))
            kids = list(tree.children[v])
            laws = [sc.law(v, k) for k in ks]
            zs = [calculus.bracket_regression(law, vf.Y[kids] - vf.Y[v]) for law in laws]
            pooled = np.linalg.pinv(sum(law.pi for law in laws)) @ sum(law.pi @ z for law, z in zip(laws, zs))
            res = max(float((z - pooled) @ law.pi @ (z - pooled)) for law, z in zip(laws, zs))
            if res > worst:
                worst, where = res, tree.labels[v]
        return AggregationReport("X", worst <= tol, worst, where if worst > tol else None)
    if two is None:
        two = decompose(sc, vf)
    worst, where = 0.0, None
    sels = list(two.members)
    for a, b in itertools.combinations(sels, 2):
        sa, sb = two.members[a], two.members[b]
        for v in tree.internal:
            law = sc.law(v, a[v])
            if not law.m:
                continue
            d = math.sqrt(calculus.lhat_norm_sq(sa.U[v] - sb.U[v], law))
            if d > worst:
                worst, where = d, tree.labels[v]
    return AggregationReport("jump", worst <= 1e-9, worst, where if worst > 1e-9 else None)


# --- norm bound ------------------------------------------------------------------------------------------------


def phi_constant(sc: Scenario, gen: Generator, beta_hat: float, payoff=None) -> float:
    """sup_P E^P[sup_s esssup_Pbar E^Pbar[weighted terminal and generator-at-zero terms | F_s]]."""
    tree = sc.tree
    xi = sc.payoff if payoff is None else np.asarray(payoff, dtype=float)
    n = tree.n_nodes
    R = np.zeros(n)
    for v in reversed(range(n)):
        if tree.is_leaf(v):
            R[v] = xi[v] ** 2
            continue
        kids = list(tree.children[v])
        best = -math.inf
        for k in range(sc.family.count(v)):
            law = sc.law(v, k)
            a2 = gen.alpha2(law)
            f0 = gen.zero_value(law)
            if np.all(f0 == 0):
                fterm = np.zeros(len(kids))
            elif a2 == 0:
                fterm = np.full(len(kids), math.inf)
            else:
                fterm = f0**2 / a2 * law.dc
            val = float(law.p @ ((1.0 + beta_hat * a2 * law.dc) * (fterm + R[kids])))
            best = max(best, val)
        R[v] = best

    def outer(v: int, E: float, M: float) -> float:
        M = max(M, E * R[v])
        if tree.is_leaf(v):
            return M
        kids = list(tree.children[v])
        best = -math.inf
        for k in range(sc.family.count(v)):
            law = sc.law(v, k)
            E2 = E * (1.0 + beta_hat * gen.alpha2(law) * law.dc)
            best = max(best, sum(p * outer(c, E2, M) for p, c in zip(law.p, kids)))
        return best

    return outer(0, 1.0, 0.0)


def norm_bound_constant(beta: float, beta_hat: float, Phi: float) -> tuple[float, dict]:
    """Constant of the second-order norm bound, optimised over its free parameters."""
    if not 0 < beta < beta_hat:
        return math.inf, {"reason": "need 0 < beta < beta_hat"}
    c_s2, p_s2 = stability_constant(beta_hat, Phi)
    if not math.isfinite(c_s2):
        return math.inf, {"reason": "M1_tilde(beta_hat) >= 1"}
    m = min(1.0, beta / (1.0 + beta * Phi))
    lead = max(1.0, (1.0 + beta * Phi) / beta)
    tail = 1.0 / beta + beta * calculus.g_const(beta, Phi)
    ratio = (1.0 + beta_hat * Phi) / (beta_hat - beta)

    def total(params):
        eps, kap, w = np.exp(params[0]), 0.25 / (1.0 + np.exp(-params[1])), np.exp(params[2])
        den = 1.0 - 4.0 * kap
        q = (1.0 + eps + 4.0 * kap) / den * lead * tail
        qt = q * (1.0 + w)
        if qt >= 1:
            return math.inf
        c1 = (1.0 + 4.0 * kap) / den
        c2 = (1.0 / eps + 2.0 / kap) / den * (1.0 + beta * ratio)
        c_xi = c1 / (m * (1.0 - qt))
        c_s = c2 / (m * (1.0 - qt)) + qt / (1.0 - qt) * ratio
        c_f = q * (1.0 + 1.0 / w) / (1.0 - qt)
        return c_s2 + c_xi + c_s * c_s2 + c_f

    grid = [np.array([a, b, c]) for a in np.linspace(-2, 12, 8) for b in np.linspace(-6, 6, 7)
            for c in np.linspace(-6, 6, 7)]
    start = min(grid, key=total)
    if not math.isfinite(total(start)):
        return math.inf, {"reason": "no admissible (epsilon, kappa, varpi): the contraction factor at beta is >= 1"}
    res = minimize(total, start, method="Nelder-Mead", options=dict(xatol=1e-8, fatol=1e-10, maxiter=4000))
    best = res.x if total(res.x) <= total(start) else start
    return float(total(best)), dict(epsilon=float(np.exp(best[0])), kappa=float(0.25 / (1 + np.exp(-best[1]))),
                                    varpi=float(np.exp(best[2])), stability=c_s2, **{"stability_params": p_s2})


@dataclass
class NormBoundReport:
    lhs: float
    rhs: float
    phi: float
    constant: float
    per_measure: dict
    params: dict

    @property
    def ok(self) -> bool:
        return self.lhs <= self.rhs + 1e-10 * max(1.0, abs(self.rhs))

    def as_dict(self) -> dict:
        return dict(lhs=self.lhs, rhs=self.rhs, phi=self.phi, constant=self.constant, params=self.params, ok=self.ok)


def norm_bound_check(sc: Scenario, vf: ValueFunction, two: TwoBsdeSolution, beta: float,
                     beta_hat: float) -> NormBoundReport:
    tree = sc.tree
    gen = vf.generator
    phi = phi_constant(sc, gen, beta_hat)
    const, params = norm_bound_constant(beta, beta_hat, sc.Phi)
    per = {}
    for sel, sol in two.members.items():
        nb = weighted_norms(sol, beta)
        E_hat = exponential_weights(sol, beta_hat)
        prob = node_probabilities(tree, sc.weights(sel))
        best = np.zeros(tree.n_nodes)
        s2 = 0.0
        for v in range(tree.n_nodes):
            val = E_hat[v] * vf.Y[v] ** 2
            best[v] = val if v == 0 else max(best[tree.parent[v]], val)
            if tree.is_leaf(v):
                s2 += prob[v] * best[v]
        per[sel] = s2 + nb["Z"] + nb["U"] + nb["N"] + nb["K"]
    lhs = max(per.values())
    rhs = const * phi if phi > 0 else (0.0 if math.isfinite(const) else math.inf)
    return NormBoundReport(lhs, rhs, phi, const, per, params)


# --- invariance and optimisation link ---------------------------------------------------------------------------


@dataclass
class InvarianceReport:
    node: str
    value_gap: float
    K_gap: float
    U_gap: float
    N_gap: float
    Z_gap: float

    @property
    def worst(self) -> float:
        return max(self.value_gap, self.K_gap, self.U_gap, self.N_gap, self.Z_gap)

    def as_dict(self) -> dict:
        return dict(self.__dict__, worst=self.worst)


def invariance_check(sc: Scenario, node: int, gen: Generator | None = None, vf: ValueFunction | None = None,
                     cap: int = DEFAULT_TEST_CAP) -> InvarianceReport:
    """Solve on the re-rooted subtree and compare with the restriction of the global solution."""
    gen = gen or sc.generator
    tree = sc.tree
    vf = vf or value_function(sc, gen)
    sub, shift = shift_scenario(sc, node)
    sub_gen = gen.restrict(shift)
    vf_sub = value_function(sub, sub_gen)
    idx = list(shift.to_global)
    value_gap = float(np.max(np.abs(vf_sub.Y - vf.Y[idx])))
    gaps = dict(K=0.0, U=0.0, N=0.0, Z=0.0)
    sels, _ = tested_pastings(sub, vf_sub.argmax, cap)
    for sub_sel in sels:
        glob = list(vf.argmax)
        for j, g in enumerate(idx):
            glob[g] = sub_sel[j]
        glob = tuple(glob)
        a = solve_rbsde(sub, sub_sel, sub_gen, obstacle=vf_sub.Y)
        b = solve_rbsde(sc, glob, gen, obstacle=vf.Y)
        for j, g in enumerate(idx):
            if sub.tree.is_leaf(j):
                continue
            gaps["K"] = max(gaps["K"], abs(a.dK[j] - b.dK[g]))
            law = sc.law(g, glob[g])
            dz = a.Z[j] - b.Z[g]
            gaps["Z"] = max(gaps["Z"], float(dz @ law.pi @ dz))
            if law.m:
                gaps["U"] = max(gaps["U"], math.sqrt(calculus.lhat_norm_sq(a.U[j] - b.U[g], law)))
            for cj, cg in zip(sub.tree.children[j], tree.children[g]):
                gaps["N"] = max(gaps["N"], abs(a.dN[cj] - b.dN[cg]))
    return InvarianceReport(tree.labels[node], value_gap, gaps["K"], gaps["U"], gaps["N"], gaps["Z"])


@dataclass
class OptimisationLink:
    value: float
    optimizer: Selection
    optimizer_value: float
    best_member_value: float

    @property
    def ok(self) -> bool:
        return abs(self.value - self.optimizer_value) <= VALUE_TOL and abs(self.value - self.best_member_value) <= VALUE_TOL


def optimisation_link(sc: Scenario, vf: ValueFunction, cap: int = 10**6) -> OptimisationLink:
    gen = vf.generator
    dec = _needs_decomposition(sc, gen)
    y_opt = float(solve_bsde_stepwise(sc, vf.argmax, gen, decompose=dec).Y[0])
    best = max(float(solve_bsde_stepwise(sc, s, gen, decompose=dec).Y[0])
               for s in enumerate_pastings(sc.tree, sc.family, cap=cap))
    return OptimisationLink(vf.y0(), vf.argmax, y_opt, best)


def compare_value_functions(big: ValueFunction, small: ValueFunction, tol: float = 1e-10) -> float:
    """Largest amount by which the smaller data's value exceeds the larger one's (0 when ordered)."""
    return float(max(0.0, np.nanmax(small.Y - big.Y)))


def solve_2bsde(sc: Scenario, gen: Generator | None = None, method: str = "stepwise", cap: int = DEFAULT_TEST_CAP,
                seed: int = 0) -> tuple[ValueFunction, TwoBsdeSolution]:
    vf = value_function(sc, gen)
    return vf, decompose(sc, vf, method=method, cap=cap, seed=seed)
