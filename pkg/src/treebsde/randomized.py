"""Seeded random scenarios for the property suites."""

from __future__ import annotations

import numpy as np

from .lattice import count_pastings
from .scenario import Scenario, ScenarioError, scenario_from_spec, validate_scenario

GENERATOR_KINDS = ("zero", "intercept", "affine", "clip")
JUMP_VALUES = (-1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5)
MIN_WEIGHT = 0.05


def _weights(rng: np.random.Generator, m: int) -> list[float]:
    w = rng.dirichlet(np.full(m, 2.0))
    w = np.maximum(w, MIN_WEIGHT)
    return (w / w.sum()).tolist()


def _jump_tree(rng, horizon: int, d: int) -> dict:
    m = int(rng.integers(2, 4))
    if d == 1:
        branches = sorted(rng.choice(JUMP_VALUES, size=m, replace=False).tolist())
    else:
        pool = [[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0], [0.0, 0.0], [0.5, -0.5]]
        idx = rng.choice(len(pool), size=m, replace=False)
        branches = [pool[i] for i in sorted(idx)]
    return {"horizon": horizon, "branches": branches}


def _martingale_tree(rng, horizon: int, d: int, n_kernels: int) -> tuple[dict, list]:
    """Branches and kernels with zero mean increments."""
    if d == 1:
        s = float(rng.choice([0.5, 1.0, 1.5]))
        branches = [-s, 0.0, s]
        qs = rng.uniform(0.1, 0.4, size=n_kernels)
        kernels = [[q, 1 - 2 * q, q] for q in qs]
    else:
        branches = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]
        qs = rng.uniform(0.1, 0.4, size=n_kernels)
        kernels = [[q, q, 0.5 - q, 0.5 - q] for q in qs]
    return {"horizon": horizon, "branches": branches}, [list(map(float, k)) for k in kernels]


def _by_time(rng, horizon: int, lo: float, hi: float) -> dict:
    return {"by_time": rng.uniform(lo, hi, size=horizon).round(4).tolist()}


def random_spec(rng: np.random.Generator, *, horizon: int | None = None, n_kernels: int | None = None,
                form: str | None = None, generator: str | None = None, d: int | None = None,
                max_horizon: int = 3) -> dict:
    horizon = int(rng.integers(1, max_horizon + 1)) if horizon is None else horizon
    n_kernels = int(rng.integers(1, 3)) if n_kernels is None else n_kernels
    form = str(rng.choice(["jump", "X"])) if form is None else form
    generator = str(rng.choice(GENERATOR_KINDS)) if generator is None else generator
    d = int(rng.integers(1, 3)) if d is None else d
    if form == "X":
        tree, kernels = _martingale_tree(rng, horizon, d, n_kernels)
    else:
        tree = _jump_tree(rng, horizon, d)
        kernels = [_weights(rng, len(tree["branches"])) for _ in range(n_kernels)]
    dc = rng.uniform(0.5, 1.0, size=horizon).round(4).tolist()
    gen: dict = {"family": "zero"}
    if generator == "intercept":
        gen = {"family": "zero", "intercept": round(float(rng.uniform(-0.5, 0.5)), 4)}
    elif generator in ("affine", "clip"):
        gen = {"family": "affine" if generator == "affine" else "lipschitz-clip",
               "intercept": _by_time(rng, horizon, -0.5, 0.5),
               "y": _by_time(rng, horizon, -0.3, 0.3),
               "ybar": _by_time(rng, horizon, -0.3, 0.3)}
        if form == "jump":
            gen["rho"] = {"linear": round(float(rng.uniform(-0.3, 0.3)), 4),
                          "offset": round(float(rng.uniform(-0.1, 0.1)), 4)}
        else:
            gen["eta"] = rng.uniform(-0.3, 0.3, size=d).round(4).tolist()
        if generator == "clip":
            gen["cap"] = round(float(rng.uniform(0.2, 1.0)), 4)
    n_leaves = len(tree["branches"]) ** horizon
    payoff = {"kind": "values", "values": rng.uniform(-2, 2, size=n_leaves).round(4).tolist()}
    return {"name": "random", "tree": tree, "kernels": {"default": kernels}, "dc": dc, "form": form,
            "Phi": 0.5, "generator": gen, "payoff": payoff}


def random_scenario(rng: np.random.Generator, attempts: int = 50, max_pastings: int | None = None,
                    **kw) -> Scenario:
    """A random scenario that passes validation (and stays within the pasting budget)."""
    for _ in range(attempts):
        try:
            sc = scenario_from_spec(random_spec(rng, **kw))
        except (ScenarioError, ValueError):
            continue
        if max_pastings is not None and count_pastings(sc.tree, sc.family) > max_pastings:
            continue
        if validate_scenario(sc).ok:
            return sc
    raise RuntimeError("no valid random scenario found")


def ordered_pair(rng: np.random.Generator, sc: Scenario) -> tuple[Scenario, Scenario]:
    """(larger data, smaller data): payoff and intercept lowered by nonnegative amounts."""
    tree = sc.tree
    drop = np.zeros(tree.n_nodes)
    drop[tree.leaves] = rng.uniform(0, 0.5, size=len(tree.leaves)) * rng.integers(0, 2, size=len(tree.leaves))
    c = float(rng.uniform(0, 0.3)) * int(rng.integers(0, 2))
    small = sc.with_payoff(sc.payoff - drop).with_generator(sc.generator.with_intercept(-c))
    return sc, small


def perturbed_pair(rng: np.random.Generator, sc: Scenario, size: float = 0.3) -> tuple[Scenario, Scenario]:
    """Same Lipschitz data, payoff and intercept perturbed in either direction."""
    tree = sc.tree
    bump = np.zeros(tree.n_nodes)
    bump[tree.leaves] = rng.uniform(-size, size, size=len(tree.leaves))
    c = float(rng.uniform(-size, size))
    other = sc.with_payoff(sc.payoff + bump).with_generator(sc.generator.with_intercept(c))
    return sc, other
