"""Single-measure BSDE and reflected BSDE solvers on a tree.

Conventions: ``Z[v]``, ``U[v]`` and ``dK[v]`` are predictable and live on the
parent ``v`` of the step; ``F[c]``, ``dM[c]`` and ``dN[c]`` belong to the
child ``c``.  The one-step identity at every child ``c`` of ``v`` is

    Y[v] = Y[c] + F[c] * dc - dM[c] + dK[v],

where ``dM[c]`` is the sum of the X-integral, jump-integral and orthogonal
increments.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import calculus
from .calculus import LocalLaw, TiltError
from .generators import Generator
from .lattice import FilteredTree, Selection, node_probabilities
from .scenario import Scenario, contraction_variant

log = logging.getLogger(__name__)

SOLVER_TOL = 1e-12
RESIDUAL_TOL = 1e-10


class SolverError(RuntimeError):
    """A solver failed to converge."""


# --- one step ---------------------------------------------------------------------------


@dataclass
class StepResult:
    ybar: float
    z: np.ndarray
    u: np.ndarray
    F: np.ndarray
    dM: np.ndarray
    dN: np.ndarray
    dK: float
    iterations: int


def _integrands(law: LocalLaw, dM: np.ndarray, form: str, decompose: bool):
    d = law.x.shape[1]
    if not decompose:
        return np.zeros(d), np.zeros(law.m), dM.copy()
    if form == "jump":
        u, dN = calculus.decompose_jump_step(law, dM)
        return np.zeros(d), u, dN
    z, dN = calculus.decompose_X_step(law, dM)
    return z, np.zeros(law.m), dN


def _fixed_point(law, gen, y, form, ybar0, fix_ybar, decompose, tol, max_iter):
    """Solve ybar = E[y + f(y, ybar, z, u) dc] jointly with (z, u) from dM."""
    d = law.x.shape[1]
    needs = gen.uses_z or gen.uses_u
    ybar = float(ybar0)
    z, u = np.zeros(d), np.zeros(law.m)
    for damping in (1.0, 0.5):
        ybar, z, u = float(ybar0), np.zeros(d), np.zeros(law.m)
        for it in range(1, max_iter + 1):
            F = gen.evaluate(law, y, ybar, z, u)
            target = y + F * law.dc
            mean = law.mean(target)
            dM = target - mean
            if needs:
                z_new, u_new, _ = _integrands(law, dM, form, True)
            else:
                z_new, u_new = z, u
            y_new = ybar if fix_ybar else mean
            change = max(abs(y_new - ybar), float(np.max(np.abs(z_new - z), initial=0.0)),
                         float(np.max(np.abs(u_new - u), initial=0.0)))
            ybar = (1 - damping) * ybar + damping * y_new
            z = (1 - damping) * z + damping * z_new
            u = (1 - damping) * u + damping * u_new
            if change <= tol * max(1.0, abs(ybar)):
                return ybar, z, u, it
            if not (gen.uses_ybar and not fix_ybar) and not needs:
                return ybar, z, u, it
        log.debug("node %s: undamped inner iteration did not converge, retrying damped", law.node)
    raise SolverError(f"node {law.node}: inner fixed point did not converge")


def one_step(law: LocalLaw, gen: Generator, y: np.ndarray, form: str = "jump", obstacle: float | None = None,
             decompose: bool = True, tol: float = 1e-14, max_iter: int = 1000) -> StepResult:
    """Solve the implicit one-step system at a node given child values ``y``."""
    y = np.asarray(y, dtype=float)
    ybar, z, u, its = _fixed_point(law, gen, y, form, law.mean(y), False, decompose, tol, max_iter)
    dK = 0.0
    if obstacle is not None and ybar < obstacle:
        ybar, z, u, more = _fixed_point(law, gen, y, form, obstacle, True, decompose, tol, max_iter)
        its += more
        ybar = float(obstacle)
    F = gen.evaluate(law, y, ybar, z, u)
    target = y + F * law.dc
    mean = law.mean(target)
    if obstacle is not None and ybar == obstacle and mean < obstacle:
        dK = obstacle - mean
    else:
        ybar = mean
    dM = target - mean
    z, u, dN = _integrands(law, dM, form, decompose)
    return StepResult(ybar, z, u, F, dM, dN, dK, its)


# --- solution container ------------------------------------------------------------------


@dataclass
class BsdeSolution:
    scenario: Scenario
    sel: Selection
    generator: Generator
    terminal: np.ndarray  # terminal values on stop nodes
    Y: np.ndarray
    Z: np.ndarray
    U: list
    F: np.ndarray
    dM: np.ndarray
    dN: np.ndarray
    dK: np.ndarray
    active: np.ndarray  # bool, nodes where a step is taken
    form: str
    method: str
    obstacle: np.ndarray | None = None
    iterations: int = 0
    ratios: list = field(default_factory=list)
    residual: float = 0.0
    converged: bool = True
    beta_hat: float | None = None
    variant: str = ""

    @property
    def tree(self) -> FilteredTree:
        return self.scenario.tree

    @property
    def laws(self) -> list[LocalLaw | None]:
        return self.scenario.laws(self.sel)

    def weights(self):
        return self.scenario.weights(self.sel)

    def probabilities(self) -> np.ndarray:
        return node_probabilities(self.tree, self.weights())

    def integrand_increment(self, c: int) -> float:
        """X-integral plus compensated jump-integral increment into child c."""
        tree = self.tree
        v = int(tree.parent[c])
        law = self.scenario.law(v, self.sel[v])
        j = tree.children[v].index(c)
        inc = float(self.Z[v] @ tree.jump[c])
        if law.m:
            inc += float(law.compensated(self.U[v])[j])
        return inc

    @property
    def N(self) -> np.ndarray:
        return _accumulate_child(self.tree, self.dN, self.active)

    @property
    def K(self) -> np.ndarray:
        out = np.zeros(self.tree.n_nodes)
        for c in range(1, self.tree.n_nodes):
            v = int(self.tree.parent[c])
            out[c] = out[v] + (self.dK[v] if self.active[v] else 0.0)
        return out

    def residual_check(self) -> float:
        return dynamics_residual(self)

    def y0(self) -> float:
        return float(self.Y[0])


def _accumulate_child(tree: FilteredTree, inc: np.ndarray, active: np.ndarray) -> np.ndarray:
    out = np.zeros(tree.n_nodes)
    for c in range(1, tree.n_nodes):
        v = int(tree.parent[c])
        out[c] = out[v] + (inc[c] if active[v] else 0.0)
    return out


def active_nodes(tree: FilteredTree, stop: frozenset | None = None) -> np.ndarray:
    """Nodes strictly before the stopping time (all internal nodes by default)."""
    if stop is None:
        return np.array([not tree.is_leaf(v) for v in range(tree.n_nodes)])
    act = np.zeros(tree.n_nodes, dtype=bool)
    for v in range(tree.n_nodes):
        reached = v == 0 or act[tree.parent[v]]
        act[v] = reached and v not in stop
    return act


def _terminal_values(sc: Scenario, payoff, stop) -> np.ndarray:
    payoff = sc.payoff if payoff is None else np.asarray(payoff, dtype=float)
    if stop is None:
        bad = [sc.tree.labels[v] for v in sc.tree.leaves if not np.isfinite(payoff[v])]
        if bad:
            raise ValueError(f"terminal value missing at {bad}")
    return payoff


def _setup(sc, sel, gen, payoff, stop, obstacle):
    tree = sc.tree
    gen = gen or sc.generator
    sel = sc.default_selection() if sel is None else tuple(sel)
    xi = _terminal_values(sc, payoff, stop)
    act = active_nodes(tree, stop)
    if obstacle is not None and np.ndim(obstacle) == 0:
        # a constant obstacle binds before maturity; at stop nodes it is capped by the payoff
        level = float(obstacle)
        obstacle = np.full(tree.n_nodes, level)
        term = ~act & np.isfinite(xi)
        obstacle[term] = np.minimum(level, xi[term])
    if obstacle is not None:
        obstacle = np.asarray(obstacle, dtype=float)
        for v in range(tree.n_nodes):
            if not act[v] and (v == 0 or act[tree.parent[v]]) and obstacle[v] > xi[v] + 1e-12:
                raise ValueError(f"obstacle above terminal payoff at node {tree.labels[v]}")
    return tree, gen, sel, xi, act, obstacle


def _empty(tree: FilteredTree, xi: np.ndarray, act: np.ndarray):
    n, d = tree.n_nodes, tree.dim
    Y = np.full(n, np.nan)
    for v in range(n):
        if not act[v] and (v == 0 or act[tree.parent[v]]):
            Y[v] = xi[v]
    return Y, np.zeros((n, d)), [None] * n, np.zeros(n), np.zeros(n), np.zeros(n), np.zeros(n)


# --- exact backward recursion -----------------------------------------------------------------


def solve_bsde_stepwise(sc: Scenario, sel: Selection | None = None, gen: Generator | None = None, payoff=None,
                        obstacle=None, stop: frozenset | None = None, tol: float = 1e-14,
                        decompose: bool | None = None) -> BsdeSolution:
    """Backward recursion solving the implicit node system at every node."""
    tree, gen, sel, xi, act, obstacle = _setup(sc, sel, gen, payoff, stop, obstacle)
    if decompose is None:
        decompose = sc.form == "jump" or gen.uses_z
    Y, Z, U, F, dM, dN, dK = _empty(tree, xi, act)
    iters = 0
    for v in reversed(range(tree.n_nodes)):
        if not act[v]:
            continue
        law = sc.law(v, sel[v])
        kids = list(tree.children[v])
        L = None if obstacle is None else float(obstacle[v])
        res = one_step(law, gen, Y[kids], sc.form, L, decompose, tol)
        iters = max(iters, res.iterations)
        Y[v], Z[v], U[v], dK[v] = res.ybar, res.z, res.u, res.dK
        F[kids], dM[kids], dN[kids] = res.F, res.dM, res.dN
    sol = BsdeSolution(sc, sel, gen, xi, Y, Z, U, F, dM, dN, dK, act, sc.form,
                       "stepwise", obstacle, iterations=iters)
    sol.residual = dynamics_residual(sol)
    return sol


# --- Picard iteration ---------------------------------------------------------------------------


def _norm_parts(variant: str) -> tuple[bool, bool]:
    """Which of (alpha Y, alpha Y_-) enter the contraction norm."""
    return {"M1_tilde": (True, True), "M2_tilde": (True, False), "M3_tilde": (False, True)}.get(variant, (False, False))


def picard_distance(sc: Scenario, sel: Selection, a, b, beta: float, alpha2: np.ndarray, act: np.ndarray,
                    parts: tuple[bool, bool] = (True, True)) -> float:
    """Weighted squared distance of two iterates (Y, Z, U)."""
    tree = sc.tree
    Ya, Za, Ua = a
    Yb, Zb, Ub = b
    prob = node_probabilities(tree, sc.weights(sel))
    E = np.ones(tree.n_nodes)
    total = 0.0
    for c in range(1, tree.n_nodes):
        v = int(tree.parent[c])
        if not act[v]:
            continue
        law = sc.law(v, sel[v])
        dA = alpha2[v] * law.dc
        E[c] = E[v] * (1.0 + beta * dA)
        term = 0.0
        if parts[0]:
            term += (Ya[c] - Yb[c]) ** 2 * dA
        if parts[1]:
            term += (Ya[v] - Yb[v]) ** 2 * dA
        dz = Za[v] - Zb[v]
        term += float(dz @ law.pi @ dz) * law.dc
        if law.m and Ua[v] is not None and Ub[v] is not None:
            term += calculus.lhat_norm_sq(Ua[v] - Ub[v], law) * law.dc
        total += prob[c] * E[c] * term
    return total


def solve_bsde_picard(sc: Scenario, sel: Selection | None = None, gen: Generator | None = None, payoff=None,
                      obstacle=None, stop: frozenset | None = None, beta_hat: float | None = None,
                      tol: float = SOLVER_TOL, max_iter: int = 500, decompose: bool | None = None) -> BsdeSolution:
    """Picard iteration with the generator frozen at the previous iterate.

    ``decompose=None`` splits the martingale part unless the scenario is
    X-driven and the generator ignores z (the split along X then needs a
    martingale law and carries no information).
    """
    tree, gen, sel, xi, act, obstacle = _setup(sc, sel, gen, payoff, stop, obstacle)
    if decompose is None:
        decompose = sc.form == "jump" or gen.uses_z
    reflected = obstacle is not None
    if beta_hat is None:
        beta_hat = sc.resolved_beta_hat(reflected=reflected or None)
    variant, fn = contraction_variant(gen)
    if reflected:
        variant, fn = "M1", calculus.m1_reflected
    parts = _norm_parts(variant) if not reflected else (True, True)
    alpha2 = sc.alpha2(sel, gen)
    n, d = tree.n_nodes, tree.dim
    Y = np.where(np.isfinite(_empty(tree, xi, act)[0]), _empty(tree, xi, act)[0], 0.0)
    Z = np.zeros((n, d))
    U = [None if not act[v] else np.zeros(sc.law(v, sel[v]).m) for v in range(n)]
    ratios: list[float] = []
    prev_D = None
    noise = 1e-26
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        Yn, Zn, Un, Fn, dMn, dNn, dKn = _empty(tree, xi, act)
        for v in reversed(range(n)):
            if not act[v]:
                continue
            law = sc.law(v, sel[v])
            kids = list(tree.children[v])
            F = gen.evaluate(law, Y[kids], Y[v], Z[v], U[v])
            target = Yn[kids] + F * law.dc
            mean = law.mean(target)
            if reflected and obstacle[v] > mean:
                Yn[v] = obstacle[v]
                dKn[v] = obstacle[v] - mean
            else:
                Yn[v] = mean
            dM = target - mean
            Zn[v], Un[v], dNn[kids] = _integrands(law, dM, sc.form, decompose)
            Fn[kids], dMn[kids] = F, dM
        D = picard_distance(sc, sel, (Yn, Zn, Un), (np.nan_to_num(Y), Z, U), beta_hat, alpha2, act, parts)
        if prev_D is not None and prev_D > noise and D > noise:
            ratios.append(D / prev_D)
        prev_D = D
        change = max(float(np.nanmax(np.abs(np.nan_to_num(Yn) - np.nan_to_num(Y)))),
                     float(np.max(np.abs(Zn - Z))),
                     max((float(np.max(np.abs(Un[v] - U[v]), initial=0.0)) for v in range(n) if act[v]), default=0.0))
        Y, Z, U = Yn, Zn, Un
        Fs, dMs, dNs, dKs = Fn, dMn, dNn, dKn
        if it > 1 and math.sqrt(D) <= tol and change <= tol * max(1.0, float(np.nanmax(np.abs(Y)))):
            converged = True
            break
    Y_out = np.where(act | np.isfinite(_empty(tree, xi, act)[0]), Y, np.nan)
    bound = fn(beta_hat, sc.Phi)
    log.info("picard: %d iterations, ratios %s, bound %s(%.4g) = %.4g", it, ["%.3g" % r for r in ratios],
             variant, beta_hat, bound)
    sol = BsdeSolution(sc, sel, gen, xi, Y_out, Z, U, Fs, dMs, dNs, dKs, act, sc.form, "picard", obstacle,
                       iterations=it, ratios=ratios, converged=converged, beta_hat=beta_hat, variant=variant)
    sol.F = _recompute_F(sol)
    sol.residual = dynamics_residual(sol)
    if not converged:
        last = ratios[-1] if ratios else float("nan")
        raise SolverError(f"Picard iteration did not converge in {max_iter} steps (last ratio {last:.4g})")
    return sol


def contraction_bound(sol: BsdeSolution) -> float:
    if sol.variant == "M1":
        return calculus.m1_reflected(sol.beta_hat, sol.scenario.Phi)
    return contraction_variant(sol.generator)[1](sol.beta_hat, sol.scenario.Phi)


def _recompute_F(sol: BsdeSolution) -> np.ndarray:
    tree = sol.tree
    F = np.zeros(tree.n_nodes)
    for v in range(tree.n_nodes):
        if not sol.active[v]:
            continue
        kids = list(tree.children[v])
        law = sol.scenario.law(v, sol.sel[v])
        F[kids] = sol.generator.evaluate(law, sol.Y[kids], sol.Y[v], sol.Z[v], sol.U[v])
    return F


def dynamics_residual(sol: BsdeSolution) -> float:
    """Largest violation of the one-step identity, with f evaluated at the solution."""
    tree = sol.tree
    worst = 0.0
    F = _recompute_F(sol)
    for v in range(tree.n_nodes):
        if not sol.active[v]:
            continue
        for c in tree.children[v]:
            dM = sol.integrand_increment(c) + sol.dN[c]
            law = sol.scenario.law(v, sol.sel[v])
            gap = sol.Y[v] - (sol.Y[c] + F[c] * law.dc - dM + sol.dK[v])
            worst = max(worst, abs(gap))
    return worst


def solve_bsde(sc: Scenario, sel=None, gen=None, payoff=None, method: str = "stepwise", **kw) -> BsdeSolution:
    if method == "picard":
        return solve_bsde_picard(sc, sel, gen, payoff, **kw)
    if method == "stepwise":
        kw.pop("beta_hat", None)
        kw.pop("max_iter", None)
        return solve_bsde_stepwise(sc, sel, gen, payoff, **kw)
    raise ValueError(f"unknown method {method!r}")


def solve_rbsde(sc: Scenario, sel=None, gen=None, payoff=None, obstacle=None, method: str = "stepwise",
                **kw) -> BsdeSolution:
    """Reflected solve with a lower obstacle; ``obstacle=None`` means no reflection."""
    if obstacle is None:
        obstacle = sc.obstacle
    return solve_bsde(sc, sel, gen, payoff, method=method, obstacle=obstacle, **kw)


def conditional_chain(sc: Scenario, sel: Selection, payoff=None) -> np.ndarray:
    """Iterated one-step conditional expectations of the terminal payoff."""
    tree = sc.tree
    w = sc.weights(sel)
    out = np.array(sc.payoff if payoff is None else payoff, dtype=float)
    from .lattice import conditional_expectation

    for t in range(tree.horizon - 1, -1, -1):
        ce = conditional_expectation(tree, w, out, t)
        lvl = tree.level(t)
        out[lvl] = ce[lvl]
    return out


# --- linear BSDE by measure change ---------------------------------------------------------------


def linear_bsde_closed_form(sc: Scenario, sel: Selection, eta=None, rho=None, zeta=None) -> np.ndarray:
    """Y_t = E^Q[zeta | F_t] for the tilt with densities 1 + eta.dX + rho~."""
    tree = sc.tree
    laws = sc.laws(sel)
    _, tilted = calculus.girsanov_density(tree, laws, eta, rho)
    zeta = sc.payoff if zeta is None else np.asarray(zeta, dtype=float)
    out = np.full(tree.n_nodes, np.nan)
    for v in tree.leaves:
        out[v] = zeta[v]
    for v in reversed(range(tree.n_nodes)):
        if tree.is_leaf(v):
            continue
        out[v] = float(tilted[v] @ out[list(tree.children[v])])
    return out


# --- norms -------------------------------------------------------------------------------------------


def exponential_weights(sol: BsdeSolution, beta: float) -> np.ndarray:
    tree = sol.tree
    a2 = sol.scenario.alpha2(sol.sel, sol.generator)
    E = np.ones(tree.n_nodes)
    for c in range(1, tree.n_nodes):
        v = int(tree.parent[c])
        E[c] = E[v] * (1.0 + beta * a2[v] * sol.scenario.dc[tree.time[v]])
    return E


def weighted_norms(sol: BsdeSolution, beta: float) -> dict[str, float]:
    """Squared weighted norms of the solution components under its own measure."""
    tree = sol.tree
    sc = sol.scenario
    prob = sol.probabilities()
    E = exponential_weights(sol, beta)
    a2 = sc.alpha2(sol.sel, sol.generator)
    out = dict(S2=0.0, alphaY=0.0, alphaY_minus=0.0, Z=0.0, U=0.0, N=0.0, K=0.0)
    for c in range(1, tree.n_nodes):
        v = int(tree.parent[c])
        if not sol.active[v]:
            continue
        law = sc.law(v, sol.sel[v])
        w = prob[c] * E[c]
        dA = a2[v] * law.dc
        out["alphaY"] += w * sol.Y[c] ** 2 * dA
        out["alphaY_minus"] += w * sol.Y[v] ** 2 * dA
        out["Z"] += w * float(sol.Z[v] @ law.pi @ sol.Z[v]) * law.dc
        if law.m:
            out["U"] += w * calculus.lhat_norm_sq(sol.U[v], law) * law.dc
        out["N"] += w * sol.dN[c] ** 2
        out["K"] += w * sol.dK[v] ** 2
    best = np.zeros(tree.n_nodes)
    for v in range(tree.n_nodes):
        if not np.isfinite(sol.Y[v]):
            continue
        val = E[v] * sol.Y[v] ** 2
        best[v] = val if v == 0 else max(best[tree.parent[v]], val)
        if not sol.active[v]:
            out["S2"] += prob[v] * best[v]
    return out


# --- comparison ----------------------------------------------------------------------------------------


@dataclass
class ComparisonReport:
    comparable: bool
    ordered: bool = True
    max_violation: float = 0.0
    supermartingale_ok: bool = True
    supermartingale_gap: float = 0.0
    inadmissible_nodes: list = field(default_factory=list)
    reason: str = ""

    @property
    def ok(self) -> bool:
        return (not self.comparable) or (self.ordered and self.supermartingale_ok)

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _sgn(x: float) -> float:
    return 0.0 if x == 0 else math.copysign(1.0, x)


def second_difference(big: BsdeSolution, small: BsdeSolution) -> np.ndarray:
    """f(Y', Y'_-, Z', U') - f'(Y', Y'_-, Z', U') per child."""
    tree = small.tree
    out = np.zeros(tree.n_nodes)
    for v in range(tree.n_nodes):
        if not small.active[v]:
            continue
        kids = list(tree.children[v])
        law = small.scenario.law(v, small.sel[v])
        args = (small.Y[kids], small.Y[v], small.Z[v], small.U[v])
        out[kids] = big.generator.evaluate(law, *args) - small.generator.evaluate(law, *args)
    return out


def comparison_check(big: BsdeSolution, small: BsdeSolution, tol: float = 1e-10) -> ComparisonReport:
    """Check Y' <= Y and the weighted supermartingale inequality of the proof.

    ``big`` carries (xi, f), ``small`` carries (xi', f'); both under the same
    selection and tree.
    """
    tree = big.tree
    if tuple(big.sel) != tuple(small.sel):
        return ComparisonReport(False, reason="different measures")
    leaves = [v for v in range(tree.n_nodes) if not big.active[v] and np.isfinite(big.Y[v])]
    dxi = big.Y[leaves] - small.Y[leaves]
    if np.any(dxi < -tol):
        return ComparisonReport(False, reason="terminal data not ordered")
    d2f = second_difference(big, small)
    if np.any(d2f < -tol):
        return ComparisonReport(False, reason="generators not ordered along the smaller solution")
    dY = big.Y - small.Y
    viol = float(np.nanmax(np.maximum(-dY, 0.0)))
    rep = ComparisonReport(True, ordered=viol <= tol, max_violation=viol)
    gen = big.generator
    sc = big.scenario
    W = np.ones(tree.n_nodes)  # product of the two exponentials
    for v in range(tree.n_nodes):
        if not big.active[v]:
            continue
        law = sc.law(v, big.sel[v])
        kids = list(tree.children[v])
        b = gen.bounds(law)
        lam_hat = -math.sqrt(b.rbar) * _sgn(dY[v])
        lam = np.array([-math.sqrt(b.r) * _sgn(dY[c]) for c in kids])
        dz = big.Z[v] - small.Z[v]
        zn = math.sqrt(max(float(dz @ law.pi @ dz), 0.0))
        eta = -math.sqrt(b.theta_x) * dz / zn if zn > 0 else np.zeros_like(dz)
        rho = None
        if law.m:
            ell = gen.u_functional(law, big.Y[kids], big.Y[v], big.Z[v], big.U[v], small.U[v])
            try:
                rho = calculus.representer(ell, law)
            except TiltError:
                rep.inadmissible_nodes.append(tree.labels[v])
                continue
        q = law.p * calculus.tilt_factors(law, eta if sc.form == "X" else None, rho)
        for j, c in enumerate(kids):
            W[c] = W[v] * (1.0 + lam[j] * law.dc) / (1.0 - lam_hat * law.dc)
        if np.any(q <= 0):
            rep.inadmissible_nodes.append(tree.labels[v])
            continue
        lhs = W[v] * dY[v]
        rhs = float(q @ (W[kids] * dY[kids]))
        gap = rhs - lhs
        rep.supermartingale_gap = max(rep.supermartingale_gap, gap)
        if gap > tol * max(1.0, abs(lhs)):
            rep.supermartingale_ok = False
    return rep


# --- stability -----------------------------------------------------------------------------------------


def stability_constant(beta: float, Phi: float) -> tuple[float, dict]:
    """Constant of the a-priori estimate, minimised over its two free parameters."""
    m1 = calculus.m1_tilde(beta, Phi)
    if m1 >= 1:
        return math.inf, {}
    lead = max(1.0, (1.0 + beta * Phi) / beta)

    def value(logs):
        w, k = np.exp(logs)
        den = 1.0 - (1.0 + 1.0 / w) * (1.0 + 1.0 / k) * m1
        if den <= 0:
            return math.inf
        num = max((1.0 + w) * (1.0 + (1.0 + beta * Phi) / beta + 2.0 * lead), (1.0 + 1.0 / w) * (1.0 + k) * m1)
        return num / den

    grid = np.linspace(-6, 12, 37)
    start = min(((a, b) for a in grid for b in grid), key=lambda p: value(p))
    res = minimize(value, np.array(start), method="Nelder-Mead", options=dict(xatol=1e-10, fatol=1e-12))
    best = res.x if value(res.x) <= value(start) else np.array(start)
    w, k = np.exp(best)
    return float(value(best)), dict(varpi=float(w), kappa=float(k), M1_tilde=m1)


@dataclass
class StabilityReport:
    constant: float
    lhs: np.ndarray
    rhs: np.ndarray
    sup_lhs: float
    sup_rhs: float
    params: dict

    @property
    def ok(self) -> bool:
        scale = 1e-10 * np.maximum(1.0, np.abs(self.rhs))
        return bool(np.all(self.lhs <= self.rhs + scale)) and self.sup_lhs <= self.sup_rhs + 1e-10 * max(1.0, self.sup_rhs)

    def as_dict(self) -> dict:
        return dict(constant=self.constant, lhs=self.lhs.tolist(), rhs=self.rhs.tolist(), sup_lhs=self.sup_lhs,
                    sup_rhs=self.sup_rhs, params=self.params, ok=self.ok)


def stability_bound(big: BsdeSolution, small: BsdeSolution, beta: float) -> StabilityReport:
    """Both sides of the conditional a-priori estimate at every node, plus the sup bound."""
    tree = big.tree
    sc = big.scenario
    phi = max(sc.effective_Phi(big.generator), small.scenario.effective_Phi(small.generator))
    const, params = stability_constant(beta, phi)
    params = {**params, "Phi": phi}
    a2 = sc.alpha2(big.sel, big.generator)
    E = exponential_weights(big, beta)
    dY = big.Y - small.Y
    d2f = second_difference(big, small)
    n = tree.n_nodes
    run_l = np.zeros(n)  # accumulated conditional sums, computed backwards
    run_r = np.zeros(n)
    for v in reversed(range(n)):
        if not big.active[v]:
            if np.isfinite(dY[v]):
                run_r[v] = E[v] * dY[v] ** 2
            continue
        law = sc.law(v, big.sel[v])
        kids = list(tree.children[v])
        dz = big.Z[v] - small.Z[v]
        zterm = float(dz @ law.pi @ dz) * law.dc
        uterm = calculus.lhat_norm_sq(big.U[v] - small.U[v], law) * law.dc if law.m else 0.0
        dA = a2[v] * law.dc
        lsum = rsum = 0.0
        for j, c in enumerate(kids):
            dN = big.dN[c] - small.dN[c]
            step = dY[c] ** 2 * dA + dY[v] ** 2 * dA + zterm + uterm + dN**2
            lsum += law.p[j] * (E[c] * step + run_l[c])
            if d2f[c] != 0:
                fterm = math.inf if a2[v] == 0 else d2f[c] ** 2 / a2[v] * law.dc
            else:
                fterm = 0.0
            rsum += law.p[j] * (E[c] * fterm + run_r[c])
        run_l[v] = lsum
        run_r[v] = rsum
    lhs = np.where(np.isfinite(dY), E * np.nan_to_num(dY) ** 2 + run_l, 0.0)
    rhs = np.where(run_r == 0, 0.0, const * run_r)  # avoid inf * 0 when beta is inadmissible
    # sup version: E[sup_s E_s dY_s^2] against 8 max(1 + 2c/beta, (2c + 2)/beta)(xi-term + f-term)
    prob = big.probabilities()
    best = np.zeros(n)
    sup_lhs = 0.0
    for v in range(n):
        if not np.isfinite(dY[v]):
            continue
        val = E[v] * dY[v] ** 2
        best[v] = val if v == 0 else max(best[tree.parent[v]], val)
        if not big.active[v]:
            sup_lhs += prob[v] * best[v]
    factor = 8.0 * max(1.0 + 2.0 * const / beta, (2.0 * const + 2.0) / beta)
    sup_rhs = factor * float(run_r[0]) if math.isfinite(const) else math.inf
    params = dict(params, sup_factor=factor)
    return StabilityReport(const, lhs, rhs, sup_lhs, sup_rhs, params)
