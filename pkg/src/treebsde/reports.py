"""JSON/CSV serialization of solutions and reports."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from .bsde import BsdeSolution, active_nodes
from .scenario import Scenario

SCHEMA_VERSION = "1.0"


def _clean(obj):
    """Make numpy and non-finite values JSON friendly, deterministically."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return None
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return obj


def envelope(command: str, payload: dict, seed: int | None = None, ok: bool = True) -> dict:
    return _clean({"schema_version": SCHEMA_VERSION, "command": command, "seed": seed, "ok": ok, **payload})


def dumps(report: dict) -> str:
    return json.dumps(_clean(report), indent=2, sort_keys=True) + "\n"


def write_atomic(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def rows_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: _fmt(v) for k, v in r.items()})
    return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def solution_rows(sol: BsdeSolution) -> list[dict]:
    """One row per node: Y, Z components, U on the support, dN into the node, dK on the node."""
    tree = sol.tree
    rows = []
    for v in range(tree.n_nodes):
        row = {"node": tree.labels[v], "t": int(tree.time[v]), "Y": _clean(sol.Y[v])}
        for i in range(tree.dim):
            row[f"Z{i}"] = float(sol.Z[v][i]) if sol.active[v] else None
        u = sol.U[v]
        row["U"] = ";".join(repr(float(x)) for x in u) if sol.active[v] and u is not None else ""
        row["dN"] = float(sol.dN[v]) if v > 0 and sol.active[tree.parent[v]] else 0.0
        row["dK"] = float(sol.dK[v]) if sol.active[v] else 0.0
        rows.append(row)
    return rows


def solution_payload(sol: BsdeSolution, beta: float | None = None) -> dict:
    from .bsde import weighted_norms

    payload = {
        "scenario": sol.scenario.name,
        "method": sol.method,
        "selection": list(sol.sel),
        "y0": sol.y0(),
        "iterations": sol.iterations,
        "residual": sol.residual,
        "contraction_ratios": sol.ratios,
        "beta_hat": sol.beta_hat,
        "variant": sol.variant,
        "nodes": solution_rows(sol),
    }
    if beta is not None:
        payload["norms"] = weighted_norms(sol, beta)
    return payload


def solution_from_payload(sc: Scenario, data: dict, gen=None) -> BsdeSolution:
    """Rebuild a solution from its report so its invariants can be replayed."""
    tree = sc.tree
    gen = gen or sc.generator
    by_label = {row["node"]: row for row in data["nodes"]}
    n, d = tree.n_nodes, tree.dim
    sel = tuple(int(k) for k in data["selection"])
    act = active_nodes(tree)
    Y = np.array([np.nan if by_label[lab]["Y"] is None else float(by_label[lab]["Y"]) for lab in tree.labels])
    Z = np.zeros((n, d))
    U: list = [None] * n
    dN = np.zeros(n)
    dK = np.zeros(n)
    for v, lab in enumerate(tree.labels):
        row = by_label[lab]
        if act[v]:
            Z[v] = [float(row.get(f"Z{i}") or 0.0) for i in range(d)]
            raw = row.get("U") or ""
            U[v] = np.array([float(x) for x in raw.split(";")]) if raw else np.zeros(sc.law(v, sel[v]).m)
            dK[v] = float(row.get("dK") or 0.0)
        dN[v] = float(row.get("dN") or 0.0)
    return BsdeSolution(sc, sel, gen, sc.payoff, Y, Z, U, np.zeros(n), np.zeros(n), dN, dK, act, sc.form,
                        data.get("method", "replay"))


def replay_checks(sol: BsdeSolution, tol: float = 1e-10) -> list[tuple[str, bool, float]]:
    """Terminal condition, pathwise dynamics and monotone K for a stored solution."""
    from .bsde import dynamics_residual

    tree = sol.tree
    term = max((abs(sol.Y[v] - sol.terminal[v]) for v in tree.leaves), default=0.0)
    res = dynamics_residual(sol)
    neg = float(min(0.0, np.min(sol.dK)))
    return [("terminal condition", term <= tol, float(term)),
            ("dynamics residual", res <= tol, float(res)),
            ("K nondecreasing", neg >= -tol, -neg)]
