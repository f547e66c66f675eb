"""Local characteristics, the jump-integrand norm, stochastic integrals on a tree,
orthogonal decompositions, Stieltjes exponentials, contraction constants and
Girsanov tilts.

Throughout, ``dc`` is the deterministic integrator increment of the step that
leaves a node, and the compensator of the jump measure at that node is the
finite measure ``k`` on the distinct nonzero jump values among its children.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .lattice import FilteredTree

MARTINGALE_TOL = 1e-12


class DecompositionError(ValueError):
    """Input to an orthogonal decomposition violates its precondition."""


class TiltError(ValueError):
    """A measure change would produce a nonpositive child weight."""


@dataclass(frozen=True)
class LocalLaw:
    """Characteristics of one kernel at one node."""

    node: int
    p: np.ndarray  # child weights
    x: np.ndarray  # (n_children, d) jumps
    dc: float
    support: np.ndarray  # (m, d) distinct nonzero jumps
    jump_index: np.ndarray  # child -> support index, -1 for the zero jump
    k: np.ndarray  # compensator weights on the support
    a: float  # jump mass, k.sum() * dc
    has_rest: bool  # a zero-jump child exists, so a < 1 strictly
    pi: np.ndarray  # (d, d) second moments over dc
    drift: np.ndarray  # E[dX]

    @property
    def m(self) -> int:
        return len(self.k)

    @property
    def gram(self) -> np.ndarray:
        """Matrix of the jump-integrand inner product on the support."""
        return np.diag(self.k) - self.dc * np.outer(self.k, self.k)

    def hat(self, u: np.ndarray) -> float:
        return float(self.k @ u)

    def lift(self, u: np.ndarray) -> np.ndarray:
        """Value u(dX) on each child, zero on the no-jump children."""
        out = np.zeros(len(self.p))
        mask = self.jump_index >= 0
        out[mask] = np.asarray(u)[self.jump_index[mask]]
        return out

    def compensated(self, u: np.ndarray) -> np.ndarray:
        """Increment of the compensated jump integral on each child."""
        return self.lift(u) - self.dc * self.hat(u)

    def mean(self, values: np.ndarray) -> float:
        return float(self.p @ values)


def jump_support(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    keys: dict[tuple, int] = {}
    index = np.full(len(x), -1, dtype=int)
    for c, row in enumerate(x):
        if not np.any(row != 0):
            continue
        key = tuple(float(v) for v in row)
        if key not in keys:
            keys[key] = len(keys)
        index[c] = keys[key]
    d = x.shape[1]
    support = np.array(list(keys), dtype=float).reshape(len(keys), d)
    return support, index


def local_law(tree: FilteredTree, v: int, weights: np.ndarray, dc: float) -> LocalLaw:
    if dc <= 0:
        raise ValueError("dc must be positive")
    kids = list(tree.children[v])
    x = tree.jump[kids]
    p = np.asarray(weights, dtype=float)
    support, index = jump_support(x)
    k = np.zeros(len(support))
    for c in range(len(kids)):
        if index[c] >= 0:
            k[index[c]] += p[c]
    a = float(k.sum())
    k = k / dc
    pi = (x.T * p) @ x / dc
    drift = p @ x
    return LocalLaw(v, p, x, float(dc), support, index, k, a, bool(np.any(index < 0)), pi, drift)


def compensator(tree: FilteredTree, weights: Sequence[np.ndarray | None], dc: Sequence[float]) -> list[LocalLaw | None]:
    """Characteristics at every non-leaf node under the given child weights."""
    return [None if w is None else local_law(tree, v, w, dc[tree.time[v]]) for v, w in enumerate(weights)]


def martingale_law_check(laws: Sequence[LocalLaw | None], tol: float = MARTINGALE_TOL) -> bool:
    return all(law is None or np.max(np.abs(law.drift), initial=0.0) <= tol for law in laws)


# --- the jump-integrand norm -------------------------------------------------


def lhat_inner(u: np.ndarray, w: np.ndarray, law: LocalLaw) -> float:
    return float(np.asarray(u) @ law.gram @ np.asarray(w))


def lhat_norm_sq(u: np.ndarray, law: LocalLaw) -> float:
    """Squared norm written literally with the no-jump correction term."""
    u = np.asarray(u, dtype=float)
    uh = law.hat(u)
    val = float(law.k @ (u - uh * law.dc) ** 2 + abs(1.0 - law.a) * uh**2 * law.dc)
    return max(val, 0.0)


def dual_norm_sq(ell: np.ndarray, law: LocalLaw, tol: float = 1e-10) -> float:
    """Squared operator norm of ``u -> ell @ u`` for the jump-integrand norm.

    Infinite when the functional does not vanish on the null space of the
    norm (constants when no zero-jump child exists).
    """
    ell = np.asarray(ell, dtype=float)
    if ell.size == 0:
        return 0.0
    g = law.gram
    rep = np.linalg.pinv(g) @ ell
    if np.max(np.abs(g @ rep - ell)) > tol * max(1.0, np.max(np.abs(ell))):
        return math.inf
    return max(float(ell @ rep), 0.0)


def representer(ell: np.ndarray, law: LocalLaw, tol: float = 1e-10) -> np.ndarray:
    """A map rho with ``<rho, u> = ell @ u`` for every u."""
    ell = np.asarray(ell, dtype=float)
    if ell.size == 0:
        return ell.copy()
    g = law.gram
    rep = np.linalg.pinv(g) @ ell
    if np.max(np.abs(g @ rep - ell)) > tol * max(1.0, np.max(np.abs(ell))):
        raise TiltError(f"node {law.node}: functional is not representable in the jump-integrand norm")
    return rep


# --- stochastic integrals --------------------------------------------------------


def integral_jump(tree: FilteredTree, laws: Sequence[LocalLaw | None], U: Sequence[np.ndarray | None]) -> np.ndarray:
    out = np.zeros(tree.n_nodes)
    for v in range(tree.n_nodes):
        law = laws[v]
        if law is None:
            continue
        inc = law.compensated(U[v])
        for j, c in enumerate(tree.children[v]):
            out[c] = out[v] + inc[j]
    return out


def integral_X(tree: FilteredTree, Z: np.ndarray) -> np.ndarray:
    out = np.zeros(tree.n_nodes)
    for c in range(1, tree.n_nodes):
        v = tree.parent[c]
        out[c] = out[v] + float(Z[v] @ tree.jump[c])
    return out


# --- orthogonal decompositions --------------------------------------------------


def _check_centred(law: LocalLaw, dM: np.ndarray, tol: float) -> None:
    mean = law.mean(dM)
    scale = max(1.0, float(np.max(np.abs(dM), initial=0.0)))
    if abs(mean) > tol * scale:
        raise DecompositionError(f"node {law.node}: increment has conditional mean {mean:.3e}, not a martingale")


def decompose_jump_step(law: LocalLaw, dM: np.ndarray, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Split a centred increment into a jump integrand and an orthogonal rest."""
    dM = np.asarray(dM, dtype=float)
    _check_centred(law, dM, tol)
    w = np.zeros(law.m)
    mass = np.zeros(law.m)
    for c, j in enumerate(law.jump_index):
        if j >= 0:
            w[j] += law.p[c] * dM[c]
            mass[j] += law.p[c]
    if law.m:
        w = w / mass
    u = w.copy()
    if law.has_rest:
        u = u + law.dc * float(law.k @ w) / (1.0 - law.a)
    dN = dM - law.compensated(u)
    return u, dN


def decompose_X_step(law: LocalLaw, dM: np.ndarray, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Regress a centred increment on dX through the pseudo-inverse of pi."""
    dM = np.asarray(dM, dtype=float)
    _check_centred(law, dM, tol)
    if np.max(np.abs(law.drift), initial=0.0) > MARTINGALE_TOL:
        raise DecompositionError(f"node {law.node}: kernel is not a martingale law (drift {law.drift.tolist()})")
    z = bracket_regression(law, dM)
    dN = dM - law.x @ z
    return z, dN


def bracket_regression(law: LocalLaw, dY: np.ndarray) -> np.ndarray:
    """pi^+ E[dY dX] / dc with raw second moments, no centring."""
    cross = law.x.T @ (law.p * np.asarray(dY, dtype=float)) / law.dc
    return np.linalg.pinv(law.pi) @ cross


def orth_decompose_jump(tree: FilteredTree, laws: Sequence[LocalLaw | None], M: np.ndarray, tol: float = 1e-10):
    """Per-node integrands U and the orthogonal martingale N (N at the root is 0)."""
    U: list[np.ndarray | None] = [None] * tree.n_nodes
    N = np.zeros(tree.n_nodes)
    for v in range(tree.n_nodes):
        law = laws[v]
        if law is None:
            continue
        kids = list(tree.children[v])
        u, dN = decompose_jump_step(law, M[kids] - M[v], tol)
        U[v] = u
        N[kids] = N[v] + dN
    return U, N


def orth_decompose_X(tree: FilteredTree, laws: Sequence[LocalLaw | None], M: np.ndarray, tol: float = 1e-10):
    Z = np.zeros((tree.n_nodes, tree.dim))
    N = np.zeros(tree.n_nodes)
    for v in range(tree.n_nodes):
        law = laws[v]
        if law is None:
            continue
        kids = list(tree.children[v])
        z, dN = decompose_X_step(law, M[kids] - M[v], tol)
        Z[v] = z
        N[kids] = N[v] + dN
    return Z, N


# --- Stieltjes exponentials --------------------------------------------------------


def stieltjes_exponential(increments: Sequence[float], scale: float = 1.0) -> np.ndarray:
    """Running product of (1 + scale * increment) for a pure-jump path."""
    inc = scale * np.asarray(increments, dtype=float)
    if np.any(inc <= -1.0):
        raise ValueError("Stieltjes exponential needs increments > -1")
    return np.cumprod(1.0 + inc)


def exponential_on_tree(tree: FilteredTree, increments: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Path-dependent exponential; ``increments[c]`` is the step into node c."""
    out = np.ones(tree.n_nodes)
    for c in range(1, tree.n_nodes):
        factor = 1.0 + scale * increments[c]
        if factor <= 0:
            raise ValueError(f"node {tree.labels[c]}: exponential factor {factor} is not positive")
        out[c] = out[tree.parent[c]] * factor
    return out


def fv_exponential_sides(gamma: float, dA: np.ndarray, dV: np.ndarray, t: int) -> tuple[float, float]:
    """Both sides of the summation-by-parts identity for a nondecreasing path V.

    ``dA[s]`` and ``dV[s]`` are the increments at step s = 1..T (index 0
    unused).  Returns (sum over s > t of E_s dV_s, the rearranged form).
    """
    dA = np.asarray(dA, dtype=float)
    dV = np.asarray(dV, dtype=float)
    T = len(dA) - 1
    E = np.ones(T + 1)
    for s in range(1, T + 1):
        E[s] = E[s - 1] * (1.0 + gamma * dA[s])
    V = np.concatenate([[0.0], np.cumsum(dV[1:])])
    lhs = float(sum(E[s] * dV[s] for s in range(t + 1, T + 1)))
    rhs = E[t] * (V[T] - V[t]) + gamma * float(sum(E[u - 1] * (V[T] - V[u - 1]) * dA[u] for u in range(t + 1, T + 1)))
    return lhs, rhs


# --- contraction constants ---------------------------------------------------------


@dataclass(frozen=True)
class ConstantsTable:
    beta: float
    Phi: float
    f: float
    g: float
    M1_tilde: float
    M2_tilde: float
    M3_tilde: float
    M1: float
    beta_star: float

    def as_dict(self) -> dict:
        return dict(beta=self.beta, Phi=self.Phi, f=self.f, g=self.g, M1_tilde=self.M1_tilde,
                    M2_tilde=self.M2_tilde, M3_tilde=self.M3_tilde, M1=self.M1, beta_star=self.beta_star)


def _check_args(beta: float, Phi: float) -> None:
    if not beta > 0:
        raise ValueError("beta must be positive")
    if not 0 <= Phi < 1:
        raise ValueError("Phi must lie in [0, 1)")


def f_const(beta: float, Phi: float) -> float:
    _check_args(beta, Phi)
    return 4.0 * (1.0 + beta * Phi) / beta**2


def g_const(beta: float, Phi: float) -> float:
    _check_args(beta, Phi)
    # cancellation-free form; equals 4 / beta^2 at Phi = 0
    s = math.sqrt(1.0 + beta * Phi)
    return (1.0 + s) ** 2 / beta**2


def _lead(beta: float, Phi: float) -> float:
    return max(1.0, (1.0 + beta * Phi) / beta)


def m1_tilde(beta: float, Phi: float) -> float:
    return f_const(beta, Phi) + 1.0 / beta + _lead(beta, Phi) * (1.0 / beta + beta * g_const(beta, Phi))


def m2_tilde(beta: float, Phi: float) -> float:
    return f_const(beta, Phi) + (1.0 / beta + beta * g_const(beta, Phi))


def m3_tilde(beta: float, Phi: float) -> float:
    return 1.0 / beta + _lead(beta, Phi) * (1.0 / beta + beta * g_const(beta, Phi))


def m1_reflected(beta: float, Phi: float) -> float:
    tail = 5.0 / beta + 4.0 / beta * math.sqrt(1.0 + beta * Phi) + beta * g_const(beta, Phi)
    return f_const(beta, Phi) + 1.0 / beta + _lead(beta, Phi) * tail


def beta_star(Phi: float, tol: float = 1e-12, lo: float | None = None, hi: float = 1e6) -> float:
    """Unique root of M1(beta) = 1 by bisection on [Phi + 1e-6, 1e6]."""
    lo = Phi + 1e-6 if lo is None else lo
    h = lambda b: m1_reflected(b, Phi) - 1.0
    if h(lo) <= 0 or h(hi) >= 0:
        raise ValueError("bisection bracket does not straddle the root")
    a, b = lo, hi
    while b - a > tol * max(1.0, a):
        mid = 0.5 * (a + b)
        if h(mid) > 0:
            a = mid
        else:
            b = mid
    return 0.5 * (a + b)


def beta_star_brent(Phi: float) -> float:
    """Independent root finder used to cross-check the bisection."""
    return brentq(lambda b: m1_reflected(b, Phi) - 1.0, Phi + 1e-6, 1e6, xtol=1e-14, rtol=1e-15)


def constants(beta: float, Phi: float) -> ConstantsTable:
    return ConstantsTable(beta, Phi, f_const(beta, Phi), g_const(beta, Phi), m1_tilde(beta, Phi),
                          m2_tilde(beta, Phi), m3_tilde(beta, Phi), m1_reflected(beta, Phi), beta_star(Phi))


def beta_grid(lo: float = 0.1, hi: float = 1e6, n: int = 400) -> np.ndarray:
    return np.geomspace(lo, hi, n)


def smallest_admissible_beta(Phi: float, constant=m1_tilde, margin: float = 0.1, grid: np.ndarray | None = None) -> float:
    """Smallest grid value with ``constant(beta, Phi) < 1 - margin``."""
    grid = beta_grid() if grid is None else grid
    for b in grid:
        if constant(float(b), Phi) < 1.0 - margin:
            return float(b)
    raise ValueError(f"no beta on the grid reaches {1 - margin} for Phi={Phi}")


# --- Girsanov tilts -------------------------------------------------------------------


def tilt_factors(law: LocalLaw, eta: np.ndarray | None = None, rho: np.ndarray | None = None) -> np.ndarray:
    """Per-child density increment 1 + eta.dX + rho(dX) 1{dX != 0} - dc rho_hat."""
    h = np.ones(len(law.p))
    if eta is not None:
        h = h + law.x @ np.asarray(eta, dtype=float)
    if rho is not None:
        h = h + law.compensated(np.asarray(rho, dtype=float))
    return h


def girsanov_density(tree: FilteredTree, laws: Sequence[LocalLaw | None], eta=None, rho=None):
    """Density process and tilted child weights.

    ``eta`` and ``rho`` are per-node sequences (entries may be None).
    """
    density = np.ones(tree.n_nodes)
    tilted: list[np.ndarray | None] = []
    for v in range(tree.n_nodes):
        law = laws[v]
        if law is None:
            tilted.append(None)
            continue
        e = None if eta is None else eta[v]
        r = None if rho is None else rho[v]
        h = tilt_factors(law, e, r)
        if np.any(h <= 0):
            bad = tree.labels[tree.children[v][int(np.argmin(h))]]
            raise TiltError(f"node {tree.labels[v]}: nonpositive density factor {h.min():.4g} on child {bad}")
        w = law.p * h
        if abs(w.sum() - 1.0) > 1e-10:
            raise TiltError(f"node {tree.labels[v]}: tilted weights sum to {w.sum():.12g}")
        tilted.append(w / w.sum())
        for j, c in enumerate(tree.children[v]):
            density[c] = density[v] * h[j]
    return density, tilted


def inverse_exponential_check(tree: FilteredTree, weights: Sequence[np.ndarray | None], dM: np.ndarray):
    """Both sides of the inverse stochastic-exponential bound.

    ``dM[c]`` is the martingale increment into node c.  Returns the
    per-node left side E[sup_{u >= t} E(M)_t / E(M)_u | node], the bracket
    constant (largest pathwise sum of log E[1/(1+dM) | parent]) and the
    bound 4 exp(constant).
    """
    n = tree.n_nodes
    logd = np.zeros(n)
    for v in range(n):
        if weights[v] is None:
            continue
        kids = list(tree.children[v])
        step = 1.0 + dM[kids]
        if np.any(step <= 0):
            raise TiltError(f"node {tree.labels[v]}: jump of M not above -1")
        mean_inv = float(weights[v] @ (1.0 / step))
        for c in kids:
            logd[c] = logd[v] + math.log(mean_inv)
    const = max(float(logd[tree.leaves].max()), 1e-300)
    lhs = np.zeros(n)
    for v in range(n):
        total = 0.0
        prob = {v: 1.0}
        ratio = {v: 1.0}
        best = {v: 1.0}
        for w in tree.subtree_nodes(v):
            if weights[w] is None:
                total += prob[w] * best[w]
                continue
            for j, c in enumerate(tree.children[w]):
                prob[c] = prob[w] * weights[w][j]
                ratio[c] = ratio[w] / (1.0 + dM[c])
                best[c] = max(best[w], ratio[c])
        lhs[v] = total
    return lhs, const, 4.0 * math.exp(const)
