"""Generator families with explicit Lipschitz and linearization data.

A generator is evaluated at a parent node for one step: it receives the
child values ``y`` (one per child), the parent value ``ybar`` (the left
limit), the integrand ``z`` (X-form) or the jump map ``u`` on the node's
jump support (jump form), and returns one value per child.  Coefficients
are predictable, so they are stored per parent node.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .calculus import LocalLaw, dual_norm_sq
from .lattice import FilteredTree, Shift


@dataclass(frozen=True)
class LipschitzBounds:
    r: float
    rbar: float
    theta_x: float
    theta_mu: float

    def alpha2(self, floor: float = 0.0) -> float:
        return max(math.sqrt(self.r), math.sqrt(self.rbar), self.theta_x, self.theta_mu, floor)

    def dominates(self, other: "LipschitzBounds", tol: float = 1e-12) -> bool:
        return (self.r >= other.r - tol and self.rbar >= other.rbar - tol
                and self.theta_x >= other.theta_x - tol and self.theta_mu >= other.theta_mu - tol)


class Generator:
    """Base class; subclasses fill in ``evaluate`` and the bound data."""

    family = "base"
    uses_y = False
    uses_ybar = False
    uses_z = False
    uses_u = False
    overrides: dict | None = None
    alpha2_floor: float = 0.0

    def evaluate(self, law: LocalLaw, y: np.ndarray, ybar: float, z, u) -> np.ndarray:
        raise NotImplementedError

    def zero_value(self, law: LocalLaw) -> np.ndarray:
        return self.evaluate(law, np.zeros(len(law.p)), 0.0, np.zeros(law.x.shape[1]), np.zeros(law.m))

    def auto_bounds(self, law: LocalLaw) -> LipschitzBounds:
        raise NotImplementedError

    def bounds(self, law: LocalLaw) -> LipschitzBounds:
        auto = self.auto_bounds(law)
        if not self.overrides:
            return auto
        o = self.overrides
        return LipschitzBounds(float(o.get("r", auto.r)), float(o.get("rbar", auto.rbar)),
                               float(o.get("theta_x", auto.theta_x)), float(o.get("theta_mu", auto.theta_mu)))

    def alpha2(self, law: LocalLaw) -> float:
        return self.bounds(law).alpha2(self.alpha2_floor)

    def u_functional(self, law: LocalLaw, y, ybar, z, u, u_prime) -> np.ndarray:
        """A vector l with f(.., u) - f(.., u') >= l @ (u - u')."""
        return np.zeros(law.m)

    def u_functionals(self, law: LocalLaw) -> list[np.ndarray]:
        """Every functional the u-channel can produce (endpoints of its range)."""
        return [np.zeros(law.m)]

    def restrict(self, shift: Shift) -> "Generator":
        return self

    def with_intercept(self, shift_by: float) -> "Generator":
        raise NotImplementedError

    def describe(self) -> dict:
        return {"family": self.family}


class ZeroGenerator(Generator):
    family = "zero"

    def __init__(self, overrides: dict | None = None, alpha2_floor: float = 0.0):
        self.overrides = overrides
        self.alpha2_floor = alpha2_floor

    def evaluate(self, law, y, ybar, z, u):
        return np.zeros(len(law.p))

    def auto_bounds(self, law):
        return LipschitzBounds(0.0, 0.0, 0.0, 0.0)

    def with_intercept(self, shift_by):
        return _ConstantShift(self, shift_by)


class _ConstantShift(Generator):
    """Adds a constant to another generator."""

    def __init__(self, base: Generator, c: float):
        self.base = base
        self.c = float(c)
        self.family = base.family
        self.uses_y, self.uses_ybar, self.uses_z, self.uses_u = base.uses_y, base.uses_ybar, base.uses_z, base.uses_u
        self.overrides = base.overrides
        self.alpha2_floor = base.alpha2_floor

    def evaluate(self, law, y, ybar, z, u):
        return self.base.evaluate(law, y, ybar, z, u) + self.c

    def auto_bounds(self, law):
        return self.base.auto_bounds(law)

    def bounds(self, law):
        return self.base.bounds(law)

    def u_functional(self, law, y, ybar, z, u, u_prime):
        return self.base.u_functional(law, y, ybar, z, u, u_prime)

    def u_functionals(self, law):
        return self.base.u_functionals(law)

    def restrict(self, shift):
        return _ConstantShift(self.base.restrict(shift), self.c)

    def with_intercept(self, shift_by):
        return _ConstantShift(self.base, self.c + shift_by)


@dataclass
class AffineGenerator(Generator):
    """f = g0 + c_y y + c_ybar ybar + eta' pi z + <rho, u>.

    Every coefficient is stored per node; ``rho[v]`` is a map on the jump
    support of node v.
    """

    g0: np.ndarray
    c_y: np.ndarray
    c_ybar: np.ndarray
    eta: np.ndarray  # (n, d)
    rho: list  # per node arrays or None
    overrides: dict | None = None
    alpha2_floor: float = 0.0
    family: str = "affine"

    def __post_init__(self):
        self.uses_y = bool(np.any(self.c_y != 0))
        self.uses_ybar = bool(np.any(self.c_ybar != 0))
        self.uses_z = bool(np.any(self.eta != 0))
        self.uses_u = any(r is not None and np.any(r != 0) for r in self.rho)

    def _rho(self, law):
        r = self.rho[law.node]
        return np.zeros(law.m) if r is None else r

    def channels(self, law, y, ybar, z, u) -> list[np.ndarray | float]:
        v = law.node
        out = [self.c_y[v] * np.asarray(y, dtype=float), self.c_ybar[v] * ybar]
        out.append(0.0 if z is None else float(self.eta[v] @ law.pi @ z))
        out.append(0.0 if u is None or law.m == 0 else float(self._rho(law) @ law.gram @ u))
        return out

    def evaluate(self, law, y, ybar, z, u):
        total = self.g0[law.node] + sum(self.channels(law, y, ybar, z, u))
        return np.broadcast_to(np.asarray(total, dtype=float), (len(law.p),)).copy()

    def _active(self, law) -> list[float]:
        v = law.node
        rho = self._rho(law)
        coeffs = [self.c_y[v] ** 2, self.c_ybar[v] ** 2, float(self.eta[v] @ law.pi @ self.eta[v]),
                  float(rho @ law.gram @ rho) if law.m else 0.0]
        return coeffs

    def auto_bounds(self, law):
        c = self._active(law)
        k = sum(1 for x in c if x > 0)
        return LipschitzBounds(k * c[0], k * c[1], k * c[2], k * c[3])

    def u_functional(self, law, y, ybar, z, u, u_prime):
        return law.gram @ self._rho(law) if law.m else np.zeros(0)

    def u_functionals(self, law):
        return [law.gram @ self._rho(law) if law.m else np.zeros(0)]

    def restrict(self, shift):
        idx = list(shift.to_global)
        return replace(self, g0=self.g0[idx], c_y=self.c_y[idx], c_ybar=self.c_ybar[idx],
                       eta=self.eta[idx], rho=[self.rho[g] for g in idx])

    def with_intercept(self, shift_by):
        return replace(self, g0=self.g0 + shift_by)

    def describe(self):
        return {"family": self.family}


def _clip(x, cap):
    return np.clip(x, -cap, cap)


def _secant(a: float, b: float, cap: float) -> float:
    """Slope of the clip between two points, in [0, 1]."""
    if a == b:
        return 1.0 if abs(a) < cap else 0.0
    return float((_clip(a, cap) - _clip(b, cap)) / (a - b))


@dataclass
class ClipGenerator(AffineGenerator):
    """Affine channels passed individually through clip(., -cap, cap)."""

    cap: float = 1.0
    family: str = "lipschitz-clip"

    def evaluate(self, law, y, ybar, z, u):
        parts = self.channels(law, y, ybar, z, u)
        total = self.g0[law.node] + sum(_clip(np.asarray(p, dtype=float), self.cap) for p in parts)
        return np.broadcast_to(np.asarray(total, dtype=float), (len(law.p),)).copy()

    def u_functional(self, law, y, ybar, z, u, u_prime):
        if not law.m:
            return np.zeros(0)
        ell = law.gram @ self._rho(law)
        s = _secant(float(ell @ u), float(ell @ u_prime), self.cap)
        return s * ell

    def u_functionals(self, law):
        if not law.m:
            return [np.zeros(0)]
        ell = law.gram @ self._rho(law)
        return [np.zeros(law.m), ell]


@dataclass
class HamiltonianGenerator(Generator):
    """Extremum over a finite control set of affine generators.

    ``reward[a]`` is (n,), ``gamma[a]`` a per-node list of jump-tilt maps on
    the support, ``drift[a]`` is (n, d), ``discount`` is (n,).
    """

    labels: tuple[str, ...]
    reward: np.ndarray  # (A, n)
    gamma: list  # [A][n] arrays or None
    drift: np.ndarray  # (A, n, d)
    discount: np.ndarray  # (n,)
    dc_of_node: np.ndarray  # (n,) dc of the step leaving each node
    mode: str = "sup"
    overrides: dict | None = None
    alpha2_floor: float = 0.0
    family: str = "hamiltonian"

    def __post_init__(self):
        if self.mode not in ("sup", "inf"):
            raise ValueError("mode must be 'sup' or 'inf'")
        self.uses_y = bool(np.any(self.discount != 0))
        self.uses_ybar = False
        self.uses_z = bool(np.any(self.drift != 0))
        self.uses_u = any(g is not None and np.any(g != 1) for row in self.gamma for g in row)

    def ell(self, law: LocalLaw, a: int) -> np.ndarray:
        g = self.gamma[a][law.node]
        if g is None or law.m == 0:
            return np.zeros(law.m)
        return law.k * (np.asarray(g, dtype=float) - 1.0)

    def y_coefficient(self, v: int) -> float:
        d = self.discount[v]
        return -d / (1.0 + d * self.dc_of_node[v])

    def action_values(self, law: LocalLaw, z, u) -> np.ndarray:
        """The y-free part of f^a for every control a."""
        v = law.node
        vals = self.reward[:, v].astype(float).copy()
        for a in range(len(self.labels)):
            if z is not None:
                vals[a] += float(np.asarray(z) @ law.pi @ self.drift[a, v])
            if u is not None and law.m:
                vals[a] += float(self.ell(law, a) @ u)
        return vals

    def best_action(self, law, z, u) -> int:
        vals = self.action_values(law, z, u)
        return int(np.argmax(vals) if self.mode == "sup" else np.argmin(vals))

    def evaluate(self, law, y, ybar, z, u):
        vals = self.action_values(law, z, u)
        ext = vals.max() if self.mode == "sup" else vals.min()
        return ext + self.y_coefficient(law.node) * np.asarray(y, dtype=float)

    def auto_bounds(self, law):
        v = law.node
        cy = self.y_coefficient(v) ** 2
        tx = max(float(self.drift[a, v] @ law.pi @ self.drift[a, v]) for a in range(len(self.labels)))
        tm = max(dual_norm_sq(self.ell(law, a), law) for a in range(len(self.labels))) if law.m else 0.0
        k = sum(1 for c in (cy, tx, tm) if c > 0)
        return LipschitzBounds(k * cy, 0.0, k * tx, k * tm)

    def u_functional(self, law, y, ybar, z, u, u_prime):
        if self.mode == "sup":
            a = self.best_action(law, z, u_prime)
        else:
            a = self.best_action(law, z, u)
        return self.ell(law, a)

    def u_functionals(self, law):
        return [self.ell(law, a) for a in range(len(self.labels))]

    def restrict(self, shift):
        idx = list(shift.to_global)
        return replace(self, reward=self.reward[:, idx], gamma=[[row[g] for g in idx] for row in self.gamma],
                       drift=self.drift[:, idx], discount=self.discount[idx], dc_of_node=self.dc_of_node[idx])

    def with_intercept(self, shift_by):
        return replace(self, reward=self.reward + shift_by)


# --- construction from scenario data ---------------------------------------


def node_values(tree: FilteredTree, spec, default: float = 0.0) -> np.ndarray:
    """Resolve a scalar, a per-time list or a {label: value} map to per-node values."""
    n = tree.n_nodes
    if spec is None:
        return np.full(n, float(default))
    if isinstance(spec, dict):
        if "by_time" in spec:
            seq = list(spec["by_time"])
            return np.array([float(seq[t]) if t < len(seq) else float(default) for t in tree.time])
        out = np.full(n, float(spec.get("default", default)))
        lookup = {lab: j for j, lab in enumerate(tree.labels)}
        for key, val in spec.items():
            if key == "default":
                continue
            if str(key) not in lookup:
                raise ValueError(f"unknown node {key!r} in coefficient map")
            out[lookup[str(key)]] = float(val)
        return out
    return np.full(n, float(spec))


def node_vectors(tree: FilteredTree, spec) -> np.ndarray:
    d = tree.dim
    if spec is None:
        return np.zeros((tree.n_nodes, d))
    arr = np.atleast_1d(np.asarray(spec, dtype=float))
    if arr.shape == (d,):
        return np.tile(arr, (tree.n_nodes, 1))
    if arr.shape == (1,):
        return np.full((tree.n_nodes, d), float(arr[0]))
    raise ValueError(f"vector coefficient {spec!r} does not match dimension {d}")


def support_of(tree: FilteredTree, v: int) -> np.ndarray:
    from .calculus import jump_support

    return jump_support(tree.jump[list(tree.children[v])])[0]


def jump_map(tree: FilteredTree, spec, neutral: float = 0.0) -> list:
    """Per-node maps on the jump support from a compact description.

    ``{"linear": c, "offset": b}`` gives b + c.x; ``{"table": [[x..., value], ...]}``
    looks values up by jump; a plain number is a constant.
    """
    out: list = []
    for v in range(tree.n_nodes):
        if tree.is_leaf(v):
            out.append(None)
            continue
        sup = support_of(tree, v)
        if spec is None:
            out.append(np.full(len(sup), neutral))
            continue
        if isinstance(spec, dict):
            if "linear" in spec or "offset" in spec:
                c = np.atleast_1d(np.asarray(spec.get("linear", 0.0), dtype=float))
                if c.shape == (1,) and tree.dim > 1:
                    c = np.full(tree.dim, c[0])
                out.append(float(spec.get("offset", neutral)) + sup @ c)
                continue
            if "table" in spec:
                table = {tuple(float(a) for a in np.atleast_1d(row[:-1])): float(row[-1]) for row in spec["table"]}
                vals = []
                for s in sup:
                    key = tuple(float(a) for a in s)
                    if key not in table:
                        raise ValueError(f"jump map table misses jump {list(key)}")
                    vals.append(table[key])
                out.append(np.array(vals))
                continue
            raise ValueError(f"unknown jump map description {spec!r}")
        out.append(np.full(len(sup), float(spec)))
    return out


def generator_from_spec(tree: FilteredTree, spec: dict | None) -> Generator:
    spec = dict(spec or {"family": "zero"})
    family = spec.get("family", "zero")
    overrides = spec.get("lipschitz")
    floor = float(spec.get("alpha2_floor", 0.0))
    if family == "zero":
        gen: Generator = ZeroGenerator(overrides, floor)
        if spec.get("intercept"):
            gen = _ConstantShift(gen, float(spec["intercept"]))
        return gen
    if family in ("affine", "lipschitz-clip"):
        kwargs = dict(
            g0=node_values(tree, spec.get("intercept")),
            c_y=node_values(tree, spec.get("y")),
            c_ybar=node_values(tree, spec.get("ybar")),
            eta=node_vectors(tree, spec.get("eta")),
            rho=jump_map(tree, spec.get("rho")),
            overrides=overrides,
            alpha2_floor=floor,
        )
        if family == "affine":
            return AffineGenerator(**kwargs)
        return ClipGenerator(**kwargs, cap=float(spec.get("cap", 1.0)))
    raise ValueError(f"unknown generator family {family!r}")
