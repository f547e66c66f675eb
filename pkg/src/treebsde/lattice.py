"""Finite filtered probability trees, kernel families and enumeration oracles.

Nodes are stored in breadth-first order, so every parent precedes its
children and a reversed sweep visits children before parents.  A node is an
atom of the filtration at its time level.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

DEFAULT_PASTING_CAP = 10**6
DEFAULT_STOPPING_CAP = 10**5
WEIGHT_TOL = 1e-12


class TreeError(ValueError):
    """Structural problem with a tree or kernel description."""


class CapExceeded(RuntimeError):
    """An enumeration would exceed its configured cap."""

    def __init__(self, what: str, count: int, cap: int):
        super().__init__(f"{what}: {count} items exceeds cap {cap}")
        self.what = what
        self.count = count
        self.cap = cap


@dataclass(frozen=True)
class FilteredTree:
    """Non-recombining event tree carrying the canonical jump process X."""

    parent: np.ndarray  # int, -1 at the root
    time: np.ndarray  # int time level
    jump: np.ndarray  # (n, d) increment into each node
    X: np.ndarray  # (n, d) path value
    children: tuple[tuple[int, ...], ...]
    labels: tuple[str, ...]
    horizon: int

    @property
    def n_nodes(self) -> int:
        return len(self.parent)

    @property
    def dim(self) -> int:
        return self.jump.shape[1]

    @property
    def root(self) -> int:
        return 0

    def is_leaf(self, v: int) -> bool:
        return not self.children[v]

    def level(self, t: int) -> list[int]:
        return [v for v in range(self.n_nodes) if self.time[v] == t]

    @property
    def leaves(self) -> list[int]:
        return [v for v in range(self.n_nodes) if not self.children[v]]

    @property
    def internal(self) -> list[int]:
        return [v for v in range(self.n_nodes) if self.children[v]]

    def ancestors(self, v: int) -> list[int]:
        """Strict ancestors of ``v`` from the root downwards."""
        out = []
        w = int(self.parent[v])
        while w >= 0:
            out.append(w)
            w = int(self.parent[w])
        return out[::-1]

    def path(self, v: int) -> list[int]:
        return self.ancestors(v) + [v]

    def subtree_nodes(self, v: int) -> list[int]:
        out = [v]
        i = 0
        while i < len(out):
            out.extend(self.children[out[i]])
            i += 1
        return out

    def paths(self) -> list[list[int]]:
        return [self.path(leaf) for leaf in self.leaves]


def _as_jump(value, d: int | None) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.ndim != 1:
        raise TreeError(f"jump {value!r} is not a vector")
    if d is not None and arr.shape[0] != d:
        raise TreeError(f"jump {value!r} has dimension {arr.shape[0]}, expected {d}")
    return arr


def build_tree(spec: dict) -> FilteredTree:
    """Build and validate a tree.

    ``spec`` either gives ``horizon`` and ``branches`` (the same list of
    jumps below every non-leaf node) or an explicit ``nodes`` list of
    ``{id, parent, jump}`` records with the root's parent set to ``None``.
    """
    if "nodes" in spec:
        return _build_explicit(spec["nodes"], spec.get("horizon"))
    horizon = int(spec["horizon"])
    if horizon < 0:
        raise TreeError("horizon must be nonnegative")
    branches = [_as_jump(b, None) for b in spec["branches"]]
    if not branches:
        raise TreeError("branches must be nonempty")
    d = branches[0].shape[0]
    for b in branches:
        _as_jump(b, d)
    records = [{"id": "0", "parent": None, "jump": np.zeros(d)}]
    frontier = ["0"]
    for _ in range(horizon):
        nxt = []
        for pid in frontier:
            for j, b in enumerate(branches):
                cid = f"{pid}.{j}"
                records.append({"id": cid, "parent": pid, "jump": b})
                nxt.append(cid)
        frontier = nxt
    return _build_explicit(records, horizon)


def _build_explicit(records: Sequence[dict], horizon: int | None) -> FilteredTree:
    if not records:
        raise TreeError("tree has no nodes")
    ids = [str(r["id"]) for r in records]
    if len(set(ids)) != len(ids):
        raise TreeError("duplicate node ids")
    by_id = {str(r["id"]): r for r in records}
    roots = [i for i in ids if by_id[i].get("parent") is None]
    if len(roots) != 1:
        raise TreeError(f"expected exactly one root, found {len(roots)}")
    kids: dict[str, list[str]] = {i: [] for i in ids}
    for i in ids:
        p = by_id[i].get("parent")
        if p is None:
            continue
        p = str(p)
        if p not in by_id:
            raise TreeError(f"node {i}: unknown parent {p}")
        kids[p].append(i)
    order = [roots[0]]
    k = 0
    while k < len(order):
        order.extend(kids[order[k]])
        k += 1
    if len(order) != len(ids):
        missing = sorted(set(ids) - set(order))
        raise TreeError(f"nodes not reachable from the root: {missing}")
    index = {nid: j for j, nid in enumerate(order)}
    root_jump = by_id[roots[0]].get("jump")
    first_child = next((c for c in order[1:]), None)
    if first_child is not None:
        d = _as_jump(by_id[first_child]["jump"], None).shape[0]
    elif root_jump is not None:
        d = _as_jump(root_jump, None).shape[0]
    else:
        d = 1
    n = len(order)
    parent = np.full(n, -1, dtype=int)
    time = np.zeros(n, dtype=int)
    jump = np.zeros((n, d))
    for j, nid in enumerate(order):
        r = by_id[nid]
        if r.get("parent") is None:
            if root_jump is not None and np.any(_as_jump(root_jump, d) != 0):
                raise TreeError(f"node {nid}: the root carries no jump")
            continue
        parent[j] = index[str(r["parent"])]
        time[j] = time[parent[j]] + 1
        jump[j] = _as_jump(r["jump"], d)
    children = tuple(tuple(index[c] for c in kids[nid]) for nid in order)
    depth = int(time.max())
    if horizon is None:
        horizon = depth
    horizon = int(horizon)
    for j, nid in enumerate(order):
        if not children[j] and time[j] != horizon:
            raise TreeError(f"node {nid}: leaf at time {time[j]} but horizon is {horizon}")
        if children[j] and time[j] >= horizon:
            raise TreeError(f"node {nid}: node beyond the horizon {horizon}")
    X = np.zeros((n, d))
    for j in range(1, n):
        X[j] = X[parent[j]] + jump[j]
    return FilteredTree(parent, time, jump, X, children, tuple(order), horizon)


# --- kernel families and selections -------------------------------------


@dataclass(frozen=True)
class KernelFamily:
    """Per non-leaf node, a nonempty list of child weight vectors."""

    kernels: tuple[tuple[np.ndarray, ...] | None, ...]

    def weights(self, v: int, k: int) -> np.ndarray:
        return self.kernels[v][k]

    def count(self, v: int) -> int:
        ks = self.kernels[v]
        return 0 if ks is None else len(ks)

    def single(self, tree: FilteredTree) -> bool:
        return all(self.count(v) == 1 for v in tree.internal)


def make_family(tree: FilteredTree, default=None, overrides: dict | None = None) -> KernelFamily:
    """Attach kernel lists to every non-leaf node.

    ``default`` is a list of weight vectors used wherever ``overrides`` (keyed
    by node label or index) gives nothing.  Weights are validated.
    """
    overrides = overrides or {}
    by_label = {lab: j for j, lab in enumerate(tree.labels)}
    resolved: dict[int, list] = {}
    for key, val in overrides.items():
        if isinstance(key, (int, np.integer)) and not isinstance(key, bool):
            j = int(key)
        elif str(key) in by_label:
            j = by_label[str(key)]
        else:
            raise TreeError(f"kernel override for unknown node {key!r}")
        resolved[j] = val
    out: list[tuple[np.ndarray, ...] | None] = []
    for v in range(tree.n_nodes):
        if tree.is_leaf(v):
            out.append(None)
            continue
        raw = resolved.get(v, default)
        if raw is None:
            raise TreeError(f"node {tree.labels[v]}: no kernel given")
        ks = []
        for w in raw:
            w = np.asarray(w, dtype=float)
            check_kernel(w, len(tree.children[v]), tree.labels[v])
            ks.append(w)
        if not ks:
            raise TreeError(f"node {tree.labels[v]}: empty kernel list")
        out.append(tuple(ks))
    return KernelFamily(tuple(out))


def check_kernel(w: np.ndarray, n_children: int, label: str = "?") -> None:
    if w.shape != (n_children,):
        raise TreeError(f"node {label}: kernel has {w.size} weights for {n_children} children")
    if not np.all(np.isfinite(w)):
        raise TreeError(f"node {label}: kernel not a probability (non-finite weight)")
    if abs(w.sum() - 1.0) > WEIGHT_TOL or np.any(w < 0):
        raise TreeError(f"node {label}: kernel not a probability {w.tolist()}")
    if np.any(w == 0):
        raise TreeError(f"node {label}: kernel has a zero weight {w.tolist()}")


Selection = tuple  # one kernel index per node, -1 at leaves


def constant_selection(tree: FilteredTree, family: KernelFamily, k: int = 0) -> Selection:
    return tuple(-1 if tree.is_leaf(v) else k for v in range(tree.n_nodes))


def selection_weights(tree: FilteredTree, family: KernelFamily, sel: Selection) -> list[np.ndarray | None]:
    out: list[np.ndarray | None] = []
    for v in range(tree.n_nodes):
        if tree.is_leaf(v):
            out.append(None)
            continue
        k = sel[v]
        if not 0 <= k < family.count(v):
            raise TreeError(f"node {tree.labels[v]}: kernel index {k} out of range")
        out.append(family.weights(v, k))
    return out


def leaf_probabilities(tree: FilteredTree, weights: Sequence[np.ndarray | None], root: int = 0) -> dict[int, float]:
    prob = {root: 1.0}
    for v in tree.subtree_nodes(root):
        if weights[v] is None:
            continue
        for c, p in zip(tree.children[v], weights[v]):
            prob[c] = prob[v] * p
    return {v: prob[v] for v in tree.subtree_nodes(root) if tree.is_leaf(v)}


def node_probabilities(tree: FilteredTree, weights: Sequence[np.ndarray | None], root: int = 0) -> np.ndarray:
    """Probability of reaching each node from ``root`` (zero outside its subtree)."""
    prob = np.zeros(tree.n_nodes)
    prob[root] = 1.0
    for v in tree.subtree_nodes(root):
        if weights[v] is None:
            continue
        for c, p in zip(tree.children[v], weights[v]):
            prob[c] = prob[v] * p
    return prob


def conditional_expectation(tree: FilteredTree, weights: Sequence[np.ndarray | None], h: np.ndarray, t: int) -> np.ndarray:
    """Kernel-weighted child average of ``h`` at every time-``t`` node.

    ``h`` is indexed by node; only its level ``t+1`` entries are read.  The
    result is indexed by node with NaN away from level ``t``.
    """
    h = np.asarray(h, dtype=float)
    out = np.full(h.shape, np.nan)
    for v in tree.level(t):
        kids = list(tree.children[v])
        if not kids:
            raise TreeError(f"node {tree.labels[v]} is a leaf")
        out[v] = weights[v] @ h[kids]
    return out


def expectation_from(tree: FilteredTree, weights: Sequence[np.ndarray | None], values: np.ndarray, v: int) -> float:
    """E[values at leaves | node v], by direct leaf enumeration."""
    probs = leaf_probabilities(tree, weights, v)
    return float(sum(p * values[leaf] for leaf, p in probs.items()))


def enumerate_pastings(tree: FilteredTree, family: KernelFamily, root: int = 0, cap: int = DEFAULT_PASTING_CAP,
                       base: Selection | None = None) -> list[Selection]:
    """All kernel choices on the subtree of ``root``.

    Nodes outside the subtree take their index from ``base`` (or 0).
    """
    nodes = [v for v in tree.subtree_nodes(root) if not tree.is_leaf(v)]
    counts = [family.count(v) for v in nodes]
    total = math.prod(counts)
    if total > cap:
        raise CapExceeded("pastings", total, cap)
    template = list(base) if base is not None else list(constant_selection(tree, family))
    out = []
    for combo in itertools.product(*[range(c) for c in counts]):
        sel = template[:]
        for v, k in zip(nodes, combo):
            sel[v] = k
        out.append(tuple(sel))
    return out


def count_pastings(tree: FilteredTree, family: KernelFamily, root: int = 0) -> int:
    return math.prod(family.count(v) for v in tree.subtree_nodes(root) if not tree.is_leaf(v))


def paste(tree: FilteredTree, first: Selection, second: Selection, switch: Iterable[int]) -> Selection:
    """Use ``second`` on the subtrees below every switch node, ``first`` elsewhere."""
    out = list(first)
    for s in switch:
        for v in tree.subtree_nodes(s):
            out[v] = second[v]
    return tuple(out)


def agrees_before(tree: FilteredTree, a: Selection, b: Selection, t: int) -> bool:
    """True when the two selections coincide at every node of time < t."""
    return all(a[v] == b[v] for v in range(tree.n_nodes) if tree.time[v] < t and not tree.is_leaf(v))


# --- shifting ------------------------------------------------------------


@dataclass(frozen=True)
class Shift:
    """Translation data of a re-rooted subtree."""

    node: int
    time_offset: int
    x_offset: np.ndarray
    to_global: tuple[int, ...]  # subtree index -> global index

    def to_local(self) -> dict[int, int]:
        return {g: j for j, g in enumerate(self.to_global)}


def shift_subtree(tree: FilteredTree, node: int) -> tuple[FilteredTree, Shift]:
    """Re-root the tree at ``node``: time and X are re-based to zero."""
    nodes = tree.subtree_nodes(node)
    local = {g: j for j, g in enumerate(nodes)}
    records = []
    for g in nodes:
        records.append({
            "id": tree.labels[g],
            "parent": None if g == node else tree.labels[int(tree.parent[g])],
            "jump": np.zeros(tree.dim) if g == node else tree.jump[g],
        })
    sub = _build_explicit(records, tree.horizon - int(tree.time[node]))
    if [sub.labels[local[g]] for g in nodes] != [tree.labels[g] for g in nodes]:
        raise TreeError("subtree ordering mismatch")
    shift = Shift(node, int(tree.time[node]), tree.X[node].copy(), tuple(nodes))
    return sub, shift


def restrict_family(family: KernelFamily, shift: Shift) -> KernelFamily:
    return KernelFamily(tuple(family.kernels[g] for g in shift.to_global))


def restrict_selection(sel: Selection, shift: Shift) -> Selection:
    return tuple(sel[g] for g in shift.to_global)


# --- stopping times --------------------------------------------------------


def count_stopping_times(tree: FilteredTree, root: int = 0) -> int:
    memo: dict[int, int] = {}
    for v in reversed(tree.subtree_nodes(root)):
        if tree.is_leaf(v):
            memo[v] = 1
        else:
            memo[v] = 1 + math.prod(memo[c] for c in tree.children[v])
    return memo[root]


def enumerate_stopping_times(tree: FilteredTree, cap: int = DEFAULT_STOPPING_CAP) -> list[frozenset[int]]:
    """Every stopping time, encoded as its set of stop nodes.

    Each root-to-leaf path meets exactly one stop node, and whether a node
    stops depends only on the node itself, which is adaptedness on a tree.
    """
    total = count_stopping_times(tree)
    if total > cap:
        raise CapExceeded("stopping times", total, cap)

    def rules(v: int) -> Iterator[frozenset[int]]:
        yield frozenset([v])
        if tree.is_leaf(v):
            return
        for combo in itertools.product(*[list(rules(c)) for c in tree.children[v]]):
            yield frozenset().union(*combo)

    return list(rules(tree.root))


def constant_stopping_time(tree: FilteredTree, t: int) -> frozenset[int]:
    return frozenset(tree.level(t))


def stop_minimum(tree: FilteredTree, sigma: frozenset[int], tau: frozenset[int]) -> frozenset[int]:
    """Stop set of the minimum of two stopping times."""
    out = set()
    for v in range(tree.n_nodes):
        if v in sigma or v in tau:
            if not any(a in sigma or a in tau for a in tree.ancestors(v)):
                out.add(v)
    return frozenset(out)


def is_stopping_time(tree: FilteredTree, stops: frozenset[int]) -> bool:
    for p in tree.paths():
        if sum(1 for v in p if v in stops) != 1:
            return False
    return True


def random_selection(tree: FilteredTree, family: KernelFamily, rng: np.random.Generator) -> Selection:
    return tuple(-1 if tree.is_leaf(v) else int(rng.integers(family.count(v))) for v in range(tree.n_nodes))


@dataclass
class ProcessTable:
    """Convenience bundle for per-node values used in reports."""

    tree: FilteredTree
    columns: dict[str, np.ndarray] = field(default_factory=dict)

    def rows(self) -> list[dict]:
        out = []
        for v in range(self.tree.n_nodes):
            row = {"node": self.tree.labels[v], "t": int(self.tree.time[v])}
            for name, col in self.columns.items():
                val = col[v]
                row[name] = val.tolist() if isinstance(val, np.ndarray) else val
            out.append(row)
        return out
