"""Command-line front end.

Every option can also be set through an environment variable named
``TREEBSDE_<COMMAND>_<OPTION>`` (e.g. ``TREEBSDE_VERIFY_SEED``); flags win.
Exit codes: 0 all checks pass, 1 a numerical check failed, 2 invalid
input, 3 an enumeration cap was exceeded.
"""

from __future__ import annotations

import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click
import numpy as np
import yaml

from . import bsde as bs
from . import calculus
from . import control as ct
from . import twobsde as tb
from . import verify as vr
from .lattice import CapExceeded, TreeError
from .reports import (dumps, envelope, replay_checks, rows_to_csv, solution_from_payload, solution_payload,
                      write_atomic)
from .scenario import Scenario, ScenarioError, fixture_names, fixture_path, load_scenario, validate_scenario

EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_CAP = 0, 1, 2, 3


class InputError(click.ClickException):
    exit_code = EXIT_INPUT


def _load(source: str) -> Scenario:
    path = Path(source)
    if not path.exists() and source in fixture_names():
        path = fixture_path(source)
    try:
        return load_scenario(path)
    except FileNotFoundError as exc:
        raise InputError(f"scenario not found: {source}") from exc
    except (ScenarioError, TreeError, ValueError, KeyError, TypeError, yaml.YAMLError) as exc:
        raise InputError(f"invalid scenario {source}: {exc}") from exc


def _require_valid(sc: Scenario) -> None:
    rep = validate_scenario(sc)
    if not rep.ok:
        msg = "; ".join(f"{c.name}: {c.detail}" if c.detail else c.name for c in rep.failures())
        raise InputError(f"scenario {sc.name} failed validation: {msg}")


def _selection(sc: Scenario, raw: str | None):
    if not raw:
        return sc.default_selection()
    try:
        ks = [int(x) for x in raw.split(",")]
    except ValueError as exc:
        raise InputError(f"selection must be comma-separated integers: {raw}") from exc
    internal = sc.tree.internal
    if len(ks) != len(internal):
        raise InputError(f"selection needs {len(internal)} entries, got {len(ks)}")
    sel = [-1] * sc.tree.n_nodes
    for v, k in zip(internal, ks):
        if not 0 <= k < sc.family.count(v):
            raise InputError(f"kernel index {k} out of range at node {sc.tree.labels[v]}")
        sel[v] = k
    return tuple(sel)


def _emit(report: dict, out: str | None, tables: dict[str, list[dict]] | None = None) -> None:
    text = dumps(report)
    click.echo(text, nl=False)
    if out:
        folder = Path(out)
        write_atomic(folder / f"{report['command']}.json", text)
        for name, rows in (tables or {}).items():
            write_atomic(folder / f"{name}.csv", rows_to_csv(rows))


def _finish(ok: bool) -> None:
    sys.exit(EXIT_OK if ok else EXIT_FAIL)


class _Group(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except CapExceeded as exc:
            click.echo(f"Error: {exc}", err=True)
            sys.exit(EXIT_CAP)
        except (ScenarioError, TreeError) as exc:
            click.echo(f"Error: {exc}", err=True)
            sys.exit(EXIT_INPUT)


out_option = click.option("--out", type=click.Path(file_okay=False), default=None,
                          help="Directory for the JSON report and CSV tables.")
tol_option = click.option("--tol", type=float, default=1e-10, show_default=True, help="Pass/fail tolerance.")


@click.group(cls=_Group, context_settings={"auto_envvar_prefix": "TREEBSDE", "help_option_names": ["-h", "--help"]})
@click.option("-v", "--verbose", count=True, help="Log solver progress (repeat for debug).")
def main(verbose: int) -> None:
    """BSDEs and second-order BSDEs on finite trees."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


@main.command()
@click.argument("scenario")
@out_option
def validate(scenario: str, out: str | None) -> None:
    """Check kernels, the size of dA and the contraction constants."""
    sc = _load(scenario)
    rep = validate_scenario(sc)
    _emit(envelope("validate", {"scenario": sc.name, **rep.as_dict()}, ok=rep.ok), out)
    if not rep.ok:
        for c in rep.failures():
            click.echo(f"FAIL {c.name}: {c.detail}", err=True)
        sys.exit(EXIT_INPUT)


def _solve(sc, sel, method, beta_hat, obstacle, tol):
    kw = {}
    if method == "picard" and beta_hat is not None:
        kw["beta_hat"] = beta_hat
    return bs.solve_bsde(sc, sel, method=method, obstacle=obstacle, **kw)


@main.command("solve-bsde")
@click.argument("scenario")
@click.option("--sel", default=None, help="Kernel index per non-leaf node, comma-separated, BFS order.")
@click.option("--method", type=click.Choice(["stepwise", "picard"]), default="picard", show_default=True)
@click.option("--beta", type=float, default=None, help="Exponent for the reported weighted norms.")
@click.option("--beta-hat", type=float, default=None, help="Override the Picard norm exponent.")
@tol_option
@out_option
def solve_bsde_cmd(scenario, sel, method, beta, beta_hat, tol, out):
    """Solve the BSDE under one measure."""
    sc = _load(scenario)
    _require_valid(sc)
    sol = _solve(sc, _selection(sc, sel), method, beta_hat, None, tol)
    ok = sol.residual <= tol
    beta = sc.resolved_beta_hat() if beta is None else beta
    payload = solution_payload(sol, beta)
    _emit(envelope("solve-bsde", payload, ok=ok), out, {"solution": payload["nodes"]})
    _finish(ok)


@main.command("solve-rbsde")
@click.argument("scenario")
@click.option("--sel", default=None, help="Kernel index per non-leaf node, comma-separated, BFS order.")
@click.option("--obstacle", "level", type=float, default=None,
              help="Constant obstacle (capped by the payoff at the leaves); default: the scenario's obstacle.")
@click.option("--method", type=click.Choice(["stepwise", "picard"]), default="stepwise", show_default=True)
@click.option("--beta-hat", type=float, default=None)
@tol_option
@out_option
def solve_rbsde_cmd(scenario, sel, level, method, beta_hat, tol, out):
    """Solve the reflected BSDE with a lower obstacle."""
    sc = _load(scenario)
    _require_valid(sc)
    if level is not None:
        obstacle = np.full(sc.tree.n_nodes, level)
        obstacle[sc.tree.leaves] = np.minimum(level, sc.payoff[sc.tree.leaves])
    elif sc.obstacle is not None:
        obstacle = sc.obstacle
    else:
        raise InputError("no obstacle: give --obstacle or an obstacle block in the scenario")
    try:
        sol = _solve(sc, _selection(sc, sel), method, beta_hat, obstacle, tol)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    skorokhod = max((abs((sol.Y[v] - obstacle[v]) * sol.dK[v]) for v in sc.tree.internal), default=0.0)
    ok = sol.residual <= tol and skorokhod == 0.0
    payload = solution_payload(sol)
    payload["skorokhod"] = skorokhod
    _emit(envelope("solve-rbsde", payload, ok=ok), out, {"solution": payload["nodes"]})
    _finish(ok)


@main.command("solve-2bsde")
@click.argument("scenario")
@click.option("--cap", type=int, default=tb.DEFAULT_TEST_CAP, show_default=True,
              help="Largest number of pastings decomposed exhaustively.")
@click.option("--seed", type=int, default=0, show_default=True, help="Seed for sampled pastings above the cap.")
@click.option("--beta", type=float, default=None, help="Exponent for the norm bound (default: admissible grid value).")
@tol_option
@out_option
def solve_2bsde_cmd(scenario, cap, seed, beta, tol, out):
    """Value function, per-measure decomposition, minimality and aggregation."""
    sc = _load(scenario)
    _require_valid(sc)
    vf = tb.value_function(sc)
    try:
        two = tb.decompose(sc, vf, cap=cap, seed=seed, tol=max(tol, tb.VALUE_TOL))
    except bs.SolverError as exc:
        click.echo(f"FAIL decomposition: {exc}", err=True)
        sys.exit(EXIT_FAIL)
    tree = sc.tree
    plain = tb.minimality_plain(sc, vf)
    weighted = tb.minimality_weighted(sc, vf, two)
    agg = tb.aggregation_diagnostic(sc, vf, two)
    beta = calculus.smallest_admissible_beta(sc.Phi, calculus.m1_reflected) if beta is None else beta
    nb = tb.norm_bound_check(sc, vf, two, beta=beta, beta_hat=2.0 * beta)
    minimal_ok = bool(np.max(np.abs(weighted)) <= 1e-9)
    if not (sc.generator.uses_u and not sc.intrinsic):
        minimal_ok = minimal_ok and bool(np.max(np.abs(plain)) <= 1e-9)
    ok = minimal_ok and nb.ok
    value_rows = [{"node": tree.labels[v], "t": int(tree.time[v]), "Y": float(vf.Y[v]),
                   "argmax": int(vf.argmax[v]), "minimality": float(plain[v]), "weighted_minimality": float(weighted[v])}
                  for v in range(tree.n_nodes)]
    k_rows = []
    for sel, sol in two.members.items():
        K = sol.K
        for leaf, path in zip(tree.leaves, tree.paths()):
            k_rows.append({"selection": " ".join(map(str, (sel[v] for v in tree.internal))), "leaf": tree.labels[leaf],
                           "K": ";".join(repr(float(K[v])) for v in path)})
    payload = {
        "scenario": sc.name, "y0": vf.y0(), "value": value_rows,
        "exhaustive": two.exhaustive, "tested_measures": len(two.members), "cap": cap,
        "max_reflection_gap": two.max_mismatch, "aggregation": agg.as_dict(), "norm_bound": nb.as_dict(),
        "K_paths": k_rows,
    }
    _emit(envelope("solve-2bsde", payload, seed=seed, ok=ok), out, {"value": value_rows, "K_paths": k_rows})
    _finish(ok)


@main.command("control")
@click.argument("scenario")
@click.option("--cap", type=int, default=ct.DEFAULT_POLICY_CAP, show_default=True,
              help="Largest (pasting, policy) enumeration attempted for the oracle.")
@tol_option
@out_option
def control_cmd(scenario, cap, tol, out):
    """Robust value and optimal policy for the scenario's control block."""
    sc = _load(scenario)
    _require_valid(sc)
    if sc.control is None:
        raise InputError("scenario has no control block")
    rv = ct.robust_value(sc)
    oracle = ct.robust_value_oracle(sc, cap=cap)[0]
    ok = abs(rv.value - oracle) <= max(tol, 1e-9)
    policy = rv.policy.names(sc.tree)
    rows = [{"node": k, "action": a} for k, a in policy.items()]
    payload = {"scenario": sc.name, "value": rv.value, "oracle_value": oracle, "pasting": list(rv.pasting),
               "policy": policy, "per_measure_policies_agree": rv.per_measure_policies_agree}
    _emit(envelope("control", payload, ok=ok), out, {"policy": rows})
    _finish(ok)


def _random_job(args):
    count, seed, suites, i = args
    rng = np.random.default_rng(seed)
    from .randomized import random_scenario

    scs = [random_scenario(rng, max_pastings=64) for _ in range(count)]
    sc = scs[i]
    sc.name = f"random-{seed}-{i}"
    return sc.name, [r.as_dict() for r in vr.run_suites(sc, [s for s in suites if s != "control"], seed + i + 1)]


@main.command("verify")
@click.argument("scenarios", nargs=-1)
@click.option("--suite", type=click.Choice(["all", *vr.SUITES]), default="all", show_default=True)
@click.option("--random", "n_random", type=int, default=2, show_default=True,
              help="Number of seeded random scenarios added to the run.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--jobs", type=int, default=1, show_default=True, help="Worker processes for the random scenarios.")
@click.option("--replay", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Stored solve-bsde/solve-rbsde report to re-check against the (single) scenario.")
@tol_option
@out_option
def verify_cmd(scenarios, suite, n_random, seed, jobs, replay, tol, out):
    """Run the invariant suites; one pass/fail row per invariant."""
    suites = vr.SUITES if suite == "all" else (suite,)
    rows: list[dict] = []
    loaded = [_load(s) for s in scenarios]
    if replay:
        if len(loaded) != 1:
            raise InputError("--replay needs exactly one scenario")
        data = json.loads(Path(replay).read_text())
        try:
            sol = solution_from_payload(loaded[0], data)
        except (KeyError, ValueError, TypeError, IndexError) as exc:
            raise InputError(f"unreadable solution file: {exc!r}") from exc
        for name, ok, value in replay_checks(sol, tol):
            rows.append({"scenario": loaded[0].name, "suite": "replay", "name": name,
                         "status": "pass" if ok else "fail", "value": value, "tol": tol, "detail": ""})
    else:
        for sc in loaded:
            _require_valid(sc)
            for r in vr.run_suites(sc, suites, seed):
                rows.append({"scenario": sc.name, **r.as_dict()})
        jobs_args = [(n_random, seed, suites, i) for i in range(n_random)]
        if jobs > 1 and n_random > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(_random_job, jobs_args))
        else:
            results = [_random_job(a) for a in jobs_args]
        for name, res in results:
            rows.extend({"scenario": name, **r} for r in res)
    failed = [r for r in rows if r["status"] == "fail"]
    for r in rows:
        click.echo(f"{r['status'].upper():4} {r['scenario']} {r['suite']}: {r['name']}", err=True)
    _emit(envelope("verify", {"checks": rows, "failed": len(failed)}, seed=seed, ok=not failed), out,
          {"verify": rows})
    _finish(not failed)


@main.command("constants")
@click.option("--beta", type=float, required=True)
@click.option("--phi", type=float, default=0.0, show_default=True)
@out_option
def constants_cmd(beta, phi, out):
    """Contraction constants at (beta, Phi)."""
    try:
        table = calculus.constants(beta, phi).as_dict()
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    _emit(envelope("constants", table), out, {"constants": [table]})


@main.command("beta-star")
@click.option("--phi", type=float, default=0.0, show_default=True)
@out_option
def beta_star_cmd(phi, out):
    """Root of M1(beta) = 1 by bisection, cross-checked with Brent's method."""
    try:
        b = calculus.beta_star(phi)
        brent = calculus.beta_star_brent(phi)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    ok = abs(b - brent) <= 1e-9
    _emit(envelope("beta-star", {"Phi": phi, "beta_star": b, "brent": brent}, ok=ok), out)
    _finish(ok)


if __name__ == "__main__":  # pragma: no cover
    main()
