"""Scenario files: tree, kernel family, integrator schedule, generator, payoff.

A scenario is a YAML (or JSON) mapping; see the fixtures shipped in
``treebsde/fixtures`` for complete examples.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable

import numpy as np
import yaml

from . import calculus
from .calculus import LocalLaw
from .generators import Generator, generator_from_spec
from .lattice import (FilteredTree, KernelFamily, Selection, Shift, build_tree, constant_selection,
                      make_family, restrict_family, selection_weights, shift_subtree)

FORMS = ("jump", "X")


class ScenarioError(ValueError):
    """The scenario description is malformed."""


@dataclass
class Scenario:
    name: str
    tree: FilteredTree
    family: KernelFamily
    dc: np.ndarray  # dc[t] for the step from level t to t + 1
    form: str
    Phi: float
    generator: Generator
    payoff: np.ndarray  # per node, NaN away from leaves
    beta_hat: float | None = None
    obstacle: np.ndarray | None = None
    control: Any = None
    intrinsic: dict | None = None
    spec: dict = field(default_factory=dict)
    _laws: dict = field(default_factory=dict, repr=False)

    # --- kernels and characteristics
    def law(self, v: int, k: int) -> LocalLaw:
        key = (v, k)
        if key not in self._laws:
            w = self.family.weights(v, k)
            self._laws[key] = calculus.local_law(self.tree, v, w, float(self.dc[self.tree.time[v]]))
        return self._laws[key]

    def laws(self, sel: Selection) -> list[LocalLaw | None]:
        return [None if self.tree.is_leaf(v) else self.law(v, sel[v]) for v in range(self.tree.n_nodes)]

    def weights(self, sel: Selection) -> list[np.ndarray | None]:
        return selection_weights(self.tree, self.family, sel)

    def default_selection(self) -> Selection:
        return constant_selection(self.tree, self.family, 0)

    def dc_of_node(self) -> np.ndarray:
        return np.array([self.dc[t] if t < len(self.dc) else 0.0 for t in self.tree.time])

    def alpha2(self, sel: Selection, gen: Generator | None = None) -> np.ndarray:
        """alpha^2 per parent node under ``sel`` (zero at leaves)."""
        gen = gen or self.generator
        out = np.zeros(self.tree.n_nodes)
        for v in self.tree.internal:
            out[v] = gen.alpha2(self.law(v, sel[v]))
        return out

    def delta_A(self, sel: Selection, gen: Generator | None = None) -> np.ndarray:
        """Increment of A into each node (zero at the root)."""
        a2 = self.alpha2(sel, gen)
        out = np.zeros(self.tree.n_nodes)
        for c in range(1, self.tree.n_nodes):
            v = self.tree.parent[c]
            out[c] = a2[v] * self.dc[self.tree.time[v]]
        return out

    def leaf_payoff(self) -> np.ndarray:
        return self.payoff

    def effective_Phi(self, gen: Generator | None = None) -> float:
        """Largest increment of A over every node and kernel; never above the declared Phi."""
        gen = gen or self.generator
        worst = 0.0
        for v in self.tree.internal:
            for k in range(self.family.count(v)):
                law = self.law(v, k)
                worst = max(worst, gen.alpha2(law) * law.dc)
        return min(worst, self.Phi)

    def needs_reflection_constant(self) -> bool:
        return self.obstacle is not None or not self.family.single(self.tree)

    def resolved_beta_hat(self, reflected: bool | None = None) -> float:
        if self.beta_hat is not None:
            return float(self.beta_hat)
        if reflected is None:
            reflected = self.needs_reflection_constant()
        fn = calculus.m1_reflected if reflected else contraction_variant(self.generator)[1]
        return calculus.smallest_admissible_beta(self.Phi, fn)

    def with_generator(self, gen: Generator) -> "Scenario":
        return _copy(self, generator=gen)

    def with_payoff(self, payoff: np.ndarray) -> "Scenario":
        return _copy(self, payoff=np.asarray(payoff, dtype=float))

    def with_family(self, family: KernelFamily) -> "Scenario":
        return _copy(self, family=family, _laws={})


def _copy(sc: Scenario, **changes) -> Scenario:
    fields_ = dict(sc.__dict__)
    fields_.update(changes)
    if "_laws" not in changes:
        fields_["_laws"] = sc._laws if "family" not in changes and "dc" not in changes else {}
    return Scenario(**fields_)


def contraction_variant(gen: Generator) -> tuple[str, Callable[[float, float], float]]:
    """Name and function of the contraction constant matching the generator's arguments."""
    if gen.uses_y and gen.uses_ybar:
        return "M1_tilde", calculus.m1_tilde
    if gen.uses_y:
        return "M2_tilde", calculus.m2_tilde
    if gen.uses_ybar:
        return "M3_tilde", calculus.m3_tilde
    return "min_tilde", min_tilde


def min_tilde(beta: float, Phi: float) -> float:
    return min(calculus.m1_tilde(beta, Phi), calculus.m2_tilde(beta, Phi), calculus.m3_tilde(beta, Phi))


def min_tilde_variant(beta: float, Phi: float) -> str:
    vals = {"M1_tilde": calculus.m1_tilde(beta, Phi), "M2_tilde": calculus.m2_tilde(beta, Phi),
            "M3_tilde": calculus.m3_tilde(beta, Phi)}
    return min(vals, key=vals.get)


# --- payoffs ----------------------------------------------------------------------


def evaluate_payoff(tree: FilteredTree, spec: dict | None, nodes: list[int] | None = None,
                    x_offset: np.ndarray | None = None) -> np.ndarray:
    """Evaluate a payoff description on the given nodes (default: leaves)."""
    spec = dict(spec or {"kind": "identity"})
    nodes = tree.leaves if nodes is None else nodes
    out = np.full(tree.n_nodes, np.nan)
    kind = spec.get("kind", "identity")
    comp = int(spec.get("component", 0))
    X = tree.X if x_offset is None else tree.X + x_offset
    if kind == "values":
        vals = spec["values"]
        if isinstance(vals, dict):
            lookup = {lab: j for j, lab in enumerate(tree.labels)}
            for key, val in vals.items():
                out[lookup[str(key)]] = float(val)
        else:
            vals = list(vals)
            if len(vals) != len(nodes):
                raise ScenarioError(f"payoff lists {len(vals)} values for {len(nodes)} nodes")
            for v, val in zip(nodes, vals):
                out[v] = float(val)
        missing = [tree.labels[v] for v in nodes if np.isnan(out[v])]
        if missing:
            raise ScenarioError(f"payoff values missing for nodes {missing}")
        return out
    scale = float(spec.get("scale", 1.0))
    shift = float(spec.get("shift", 0.0))
    for v in nodes:
        x = X[v][comp]
        if kind == "identity":
            val = x
        elif kind == "abs":
            val = abs(x)
        elif kind == "square":
            val = x * x
        elif kind == "call":
            val = max(x - float(spec.get("strike", 0.0)), 0.0)
        elif kind == "put":
            val = max(float(spec.get("strike", 0.0)) - x, 0.0)
        elif kind == "constant":
            val = float(spec.get("value", 0.0))
        else:
            raise ScenarioError(f"unknown payoff kind {kind!r}")
        out[v] = scale * val + shift
    return out


# --- loading ------------------------------------------------------------------------


def load_spec(source) -> dict:
    if isinstance(source, dict):
        return source
    path = Path(source)
    text = path.read_text()
    if path.suffix == ".json":
        return json.loads(text)
    return yaml.safe_load(text)


def scenario_from_spec(spec: dict) -> Scenario:
    try:
        return _scenario_from_spec(spec)
    except (KeyError, TypeError) as exc:
        raise ScenarioError(f"malformed scenario: {exc!r}") from exc


def _scenario_from_spec(spec: dict) -> Scenario:
    if "tree" not in spec:
        raise ScenarioError("scenario has no tree")
    tree = build_tree(spec["tree"])
    kern = spec.get("kernels", {})
    if isinstance(kern, list):
        family = make_family(tree, default=kern)
    else:
        family = make_family(tree, default=kern.get("default"), overrides=kern.get("nodes"))
    N = tree.horizon
    dc_spec = spec.get("dc", 1.0)
    dc = np.array([float(dc_spec)] * N if np.isscalar(dc_spec) else [float(x) for x in dc_spec])
    if dc.shape != (N,):
        raise ScenarioError(f"dc schedule has {dc.size} entries for horizon {N}")
    if np.any(dc <= 0):
        raise ScenarioError("dc must be positive")
    form = spec.get("form", "jump")
    if form not in FORMS:
        raise ScenarioError(f"form must be one of {FORMS}")
    Phi = float(spec.get("Phi", 0.5))
    if not 0 <= Phi < 1:
        raise ScenarioError("Phi must lie in [0, 1)")
    control = None
    if spec.get("control"):
        from .control import control_spec_from_dict

        control = control_spec_from_dict(tree, spec["control"], _dc_of_node(tree, dc))
    gspec = spec.get("generator") or {"family": "zero"}
    if gspec.get("family") == "hamiltonian":
        if control is None:
            raise ScenarioError("hamiltonian generator needs a control block")
        from .control import hamiltonian_generator

        gen = hamiltonian_generator(control, overrides=gspec.get("lipschitz"),
                                    alpha2_floor=float(gspec.get("alpha2_floor", 0.0)))
    else:
        gen = generator_from_spec(tree, gspec)
    if form == "X" and gen.uses_u:
        raise ScenarioError("an X-form scenario cannot use a jump-integrand generator")
    if form == "jump" and gen.uses_z:
        raise ScenarioError("a jump-form scenario cannot use a z-dependent generator")
    payoff = evaluate_payoff(tree, spec.get("payoff"))
    obstacle = None
    if spec.get("obstacle"):
        obstacle = evaluate_payoff(tree, spec["obstacle"], nodes=list(range(tree.n_nodes)))
    beta_hat = spec.get("beta_hat")
    return Scenario(
        name=str(spec.get("name", "scenario")), tree=tree, family=family, dc=dc, form=form, Phi=Phi,
        generator=gen, payoff=payoff, beta_hat=None if beta_hat is None else float(beta_hat),
        obstacle=obstacle, control=control, intrinsic=spec.get("intrinsic"), spec=spec,
    )


def _dc_of_node(tree: FilteredTree, dc: np.ndarray) -> np.ndarray:
    return np.array([dc[t] if t < len(dc) else 0.0 for t in tree.time])


def load_scenario(source) -> Scenario:
    return scenario_from_spec(load_spec(source))


FIXTURES = ("S1", "S2", "S3")


def fixture_path(name: str) -> Path:
    return Path(str(resources.files("treebsde") / "fixtures" / f"{name}.yaml"))


def load_fixture(name: str) -> Scenario:
    return load_scenario(fixture_path(name))


def fixture_names() -> list[str]:
    folder = Path(str(resources.files("treebsde") / "fixtures"))
    return sorted(p.stem for p in folder.glob("*.yaml"))


# --- shifting --------------------------------------------------------------------------


def shift_scenario(sc: Scenario, node: int) -> tuple[Scenario, Shift]:
    """The scenario seen from ``node``: subtree, restricted kernels, shifted data."""
    sub, shift = shift_subtree(sc.tree, node)
    idx = list(shift.to_global)
    obstacle = None if sc.obstacle is None else sc.obstacle[idx]
    control = None if sc.control is None else sc.control.restrict(shift)
    new = Scenario(
        name=f"{sc.name}@{sc.tree.labels[node]}", tree=sub, family=restrict_family(sc.family, shift),
        dc=sc.dc[shift.time_offset:].copy(), form=sc.form, Phi=sc.Phi, generator=sc.generator.restrict(shift),
        payoff=sc.payoff[idx], beta_hat=sc.beta_hat, obstacle=obstacle, control=control,
        intrinsic=sc.intrinsic, spec=sc.spec,
    )
    return new, shift


# --- validation ---------------------------------------------------------------------------


@dataclass
class Check:
    name: str
    status: str  # pass, fail or warn
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.status != "fail"


@dataclass
class Report:
    checks: list[Check] = field(default_factory=list)

    def add(self, name: str, ok: bool, detail: str = "", warn_only: bool = False) -> None:
        status = "pass" if ok else ("warn" if warn_only else "fail")
        self.checks.append(Check(name, status, detail))

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    def failures(self) -> list[Check]:
        return [c for c in self.checks if not c.ok]

    def as_dict(self) -> dict:
        return {"ok": self.ok, "checks": [c.__dict__ for c in self.checks]}


def validate_scenario(sc: Scenario) -> Report:
    """Check kernels, the size of dA, the contraction constants and the law type.

    Never raises; problems become report entries.
    """
    rep = Report()
    tree = sc.tree
    bad_kernel = []
    for v in tree.internal:
        for k in range(sc.family.count(v)):
            w = sc.family.weights(v, k)
            if abs(w.sum() - 1.0) > 1e-12 or np.any(w <= 0):
                bad_kernel.append(f"{tree.labels[v]}#{k}")
    rep.add("kernel is a probability", not bad_kernel,
            "kernel not a probability at " + ", ".join(bad_kernel) if bad_kernel else "")
    rep.add("Phi < 1", 0 <= sc.Phi < 1, f"Phi = {sc.Phi}")
    worst = 0.0
    where = ""
    dominated = []
    alpha_zero = []
    try:
        for v in tree.internal:
            for k in range(sc.family.count(v)):
                law = sc.law(v, k)
                bounds = sc.generator.bounds(law)
                if not bounds.dominates(sc.generator.auto_bounds(law)):
                    dominated.append(f"{tree.labels[v]}#{k}")
                a2 = bounds.alpha2(sc.generator.alpha2_floor)
                dA = a2 * law.dc
                if dA > worst:
                    worst, where = dA, f"{tree.labels[v]}#{k}"
                if a2 == 0 and np.any(sc.generator.zero_value(law) != 0):
                    alpha_zero.append(f"{tree.labels[v]}#{k}")
        rep.add("dA <= Phi", worst <= sc.Phi, f"ΔA > Φ: max ΔA = {worst:.6g} at {where}, Φ = {sc.Phi}"
                if worst > sc.Phi else f"max ΔA = {worst:.6g}")
        rep.add("declared Lipschitz bounds dominate", not dominated,
                "override below the actual modulus at " + ", ".join(dominated) if dominated else "")
        rep.add("alpha^2 > 0 where the generator is nonzero", not alpha_zero,
                "alpha^2 = 0 with a nonzero generator at " + ", ".join(alpha_zero) if alpha_zero else "",
                warn_only=True)
    except Exception as exc:  # noqa: BLE001 - validation never raises
        rep.add("generator bounds computable", False, repr(exc))
    try:
        bh = sc.resolved_beta_hat()
        # dA <= Phi_eff holds, so the constants may be taken at the smaller bound
        phi_eff = sc.effective_Phi()
        name, fn = contraction_variant(sc.generator)
        val = fn(bh, phi_eff)
        rep.add(f"{name}(beta_hat) < 1", val < 1, f"{name}({bh:.6g}) = {val:.6g} at Phi = {phi_eff:.6g}")
        if sc.needs_reflection_constant():
            m1 = calculus.m1_reflected(bh, phi_eff)
            rep.add("M1(beta_hat) < 1", m1 < 1, f"M1({bh:.6g}) = {m1:.6g} at Phi = {phi_eff:.6g}")
    except ValueError as exc:
        rep.add("beta_hat admissible", False, str(exc))
    if sc.form == "X":
        nonmart = [f"{tree.labels[v]}#{k}" for v in tree.internal for k in range(sc.family.count(v))
                   if np.max(np.abs(sc.law(v, k).drift)) > calculus.MARTINGALE_TOL]
        rep.add("X-form kernels are martingale laws", not nonmart,
                "non-martingale kernels at " + ", ".join(nonmart) if nonmart else "",
                warn_only=not sc.generator.uses_z)
    leaves_ok = all(np.isfinite(sc.payoff[v]) for v in tree.leaves)
    rep.add("payoff defined on every leaf", leaves_ok)
    if sc.obstacle is not None:
        viol = [tree.labels[v] for v in tree.leaves if sc.obstacle[v] > sc.payoff[v] + 1e-12]
        rep.add("obstacle below terminal payoff", not viol, "obstacle above payoff at " + ", ".join(viol) if viol else "")
    return rep
