"""Command-line driver.

Exit codes: 0 success, 1 input error, 2 runtime or controller error,
3 negative verification result.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .admm import TRACE_COLUMNS, AdmmOptions, SwitchingInfeasibleError, _fmt, sw_admm
from .model import ConfigError, OutOfPartitionError, global_value, load_network
from .mpc import ControllerConfig, GuardError, simulate, write_steps_csv
from .oracle import (
    ENUMERATION_CAP, InfeasibleProblemError, StudyOptions, UndefinedMetricError,
    global_optimum, randomized_study, suboptimality,
)
from .polytope import HPolytope, PolytopeError, is_empty
from .qpcore import SOLVER_ENV_VAR
from .switching import CapacityError, d_rout
from .terminal import (
    EmptyTerminalSetError, TerminalNonConvergenceError, compute_terminal_sets,
    verify_invariance, verify_terminal_cost,
)

log = logging.getLogger("pwadmpc")

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME, EXIT_NEGATIVE = 0, 1, 2, 3

RUNTIME_ERRORS = (
    OutOfPartitionError, SwitchingInfeasibleError, CapacityError, GuardError,
    TerminalNonConvergenceError, EmptyTerminalSetError, InfeasibleProblemError,
)


class InputError(Exception):
    pass


def _json_arg(text: str, what: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{what}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None


def _read_json(path, what: str):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"{what}: {exc}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, command: str, config, seed, overrides: dict, artifacts: list[Path]) -> Path:
    """Write ``manifest.json`` atomically (temp file then rename)."""
    data = {
        "command": command,
        "config": str(config) if config is not None else None,
        "seed": seed,
        "overrides": overrides,
        "output_dir": str(out),
        "version": __version__,
        "solver_env": os.environ.get(SOLVER_ENV_VAR),
        "artifacts": {p.name: _sha256(p) for p in artifacts},
    }
    fd, tmp = tempfile.mkstemp(dir=out, prefix=".manifest", suffix=".json")
    with os.fdopen(fd, "w") as fh:
        json.dump(data, fh, indent=1, sort_keys=True)
        fh.write("\n")
    target = out / "manifest.json"
    os.replace(tmp, target)
    return target


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    return path


def _experiment(path) -> dict:
    return _read_json(path, "config").get("experiment", {})


def _x0(args_x0, exp, net):
    raw = _json_arg(args_x0, "--x0") if args_x0 is not None else exp.get("x0")
    if raw is None:
        raise InputError("no initial state: pass --x0 or add experiment.x0 to the config")
    if not isinstance(raw, list) or len(raw) != net.M:
        raise InputError(f"--x0 must list {net.M} agent states")
    out = []
    for i, (v, s) in enumerate(zip(raw, net.subsystems)):
        a = np.asarray(v, dtype=float).reshape(-1)
        if a.size != s.n:
            raise InputError(f"--x0 agent {i}: expected {s.n} entries, got {a.size}")
        out.append(a)
    return out


def _admm_opts(args, exp) -> AdmmOptions:
    a = exp.get("admm", {})
    rho = args.rho if args.rho is not None else a.get("rho", 1.0)
    T_admm = args.tadmm if args.tadmm is not None else a.get("T_admm", 50)
    T_cut = args.tcut if args.tcut is not None else a.get("T_cut", T_admm)
    if rho <= 0 or T_admm < 1 or T_cut < 0:
        raise InputError("need rho > 0, T_admm >= 1 and T_cut >= 0")
    early = not getattr(args, "fixed_iterations", False)
    return AdmmOptions(rho=float(rho), T_admm=int(T_admm), T_cut=int(T_cut), early_stop=early)


def _overrides(args, keys):
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


# ---------------------------------------------------------------- commands

def cmd_simulate(args) -> int:
    net = load_network(args.config)
    exp = _experiment(args.config)
    x0 = _x0(args.x0, exp, net)
    steps = args.steps if args.steps is not None else exp.get("steps", 30)
    if steps < 0:
        raise InputError("--steps must be nonnegative")
    starts = tuple(s.strip() for s in args.multi_start.split(",") if s.strip())
    try:
        cfg = ControllerConfig(mode=args.mode, admm=_admm_opts(args, exp), multi_start=starts)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = simulate(net, x0, cfg, steps, record_trace=True)
    steps_csv = out / "steps.csv"
    write_steps_csv(steps_csv, net, res.records)
    iters_csv = out / "iters.csv"
    rows = [dict(row, t=r.t) for r in res.records for row in r.trace]
    _write_iters(iters_csv, rows)
    write_manifest(out, "simulate", args.config, None,
                   _overrides(args, ["mode", "steps", "x0", "rho", "tadmm", "tcut", "multi_start", "fixed_iterations"]),
                   [steps_csv, iters_csv])
    entered = next((r.t for r in res.records if r.in_terminal), None)
    print(f"steps={steps} J={res.J:.17g} first_terminal_step={entered}")
    return EXIT_OK


def _write_iters(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + TRACE_COLUMNS)
        for row in rows:
            w.writerow([row["t"]] + [_fmt(row[c]) for c in TRACE_COLUMNS])


def _load_sets(path, net) -> list[HPolytope]:
    raw = _read_json(path, "--x0-sets")
    if isinstance(raw, dict):
        raw = raw.get("sets", raw)
    if not isinstance(raw, list) or len(raw) != net.M:
        raise InputError(f"--x0-sets must list {net.M} polytopes")
    try:
        sets = [HPolytope.from_dict(d) for d in raw]
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"--x0-sets: {exc}") from None
    return sets


def cmd_terminal(args) -> int:
    net = load_network(args.config)
    if args.x0_sets:
        sets0 = _load_sets(args.x0_sets, net)
    else:
        if not net.has_terminal:
            raise InputError("config has no terminal sets; pass --x0-sets")
        sets0 = [s.terminal.X_T for s in net.subsystems]
    for i, P in enumerate(sets0):
        if P.dim != net.subsystems[i].n:
            raise InputError(f"seed set {i} has dimension {P.dim}, expected {net.subsystems[i].n}")
        if is_empty(P):
            raise InputError(f"seed set {i} is empty")
    sets, it = compute_terminal_sets(net, sets0, max_iter=args.max_iter, return_iterations=True)
    rep = verify_invariance(net, sets, samples=args.samples, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    a = _write_json(out / "terminal_sets.json", {"iterations": it, "sets": [P.to_dict() for P in sets]})
    b = _write_json(out / "invariance.json", rep.to_dict())
    write_manifest(out, "terminal", args.config, args.seed,
                   _overrides(args, ["x0_sets", "max_iter", "samples"]), [a, b])
    print(f"fixed point after {it} iterations; invariance violations: {len(rep.violations)}")
    return EXIT_OK if rep.ok else EXIT_NEGATIVE


def _load_phis(path, net):
    raw = _read_json(path, "--phi")
    if isinstance(raw, dict):
        raw = raw.get("Phi", raw.get("phis"))
    if not isinstance(raw, list) or len(raw) != net.M:
        raise InputError(f"--phi must list {net.M} matrices")
    out = []
    for i, (P, s) in enumerate(zip(raw, net.subsystems)):
        try:
            a = np.asarray(P, dtype=float)
        except (TypeError, ValueError):
            raise InputError(f"--phi entry {i} is not a numeric matrix") from None
        if a.shape != (s.n, s.n):
            raise InputError(f"--phi entry {i} has shape {a.shape}, expected {(s.n, s.n)}")
        out.append(a)
    return out


def cmd_verify_lyapunov(args) -> int:
    net = load_network(args.config)
    phis = _load_phis(args.phi, net) if args.phi else None
    if phis is None and not net.has_terminal:
        raise InputError("config has no terminal costs; pass --phi")
    rep = verify_terminal_cost(net, phis, eig_tol=args.eig_tol)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        a = _write_json(out / "lyapunov.json", rep.to_dict())
        write_manifest(out, "verify-lyapunov", args.config, None, _overrides(args, ["phi", "eig_tol"]), [a])
    print(f"{'pass' if rep.ok else 'fail'}: worst max eigenvalue {rep.worst:.6g} over {len(rep.max_eig)} combinations")
    return EXIT_OK if rep.ok else EXIT_NEGATIVE


def cmd_study(args) -> int:
    if args.n < 0:
        raise InputError("--n must be nonnegative")
    opts = StudyOptions(N=args.horizon, rho=args.rho, T_cut=args.tcut, max_iter=10 * args.tcut,
                        oracle_method=args.oracle_method)
    stats = randomized_study(args.seed, args.n, opts)
    d = stats.to_dict()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        a = _write_json(out / "study.json", d)
        write_manifest(out, "study", None, args.seed,
                       _overrides(args, ["n", "horizon", "rho", "tcut", "oracle_method"]), [a])
    summary = {k: d[k] for k in ("seed", "n", "median", "mean", "std", "max", "min", "skipped")}
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_oracle(args) -> int:
    net = load_network(args.config)
    exp = _experiment(args.config)
    x0 = _x0(args.x0, exp, net)
    res = global_optimum(net, x0, args.method, cap=args.cap)
    report = {
        "method": res.method, "n_sequences_total": res.n_sequences_total, "n_feasible": res.n_feasible,
        "n_solved": res.n_solved, "best_value": res.best_value,
        "best_s": [list(s) for s in res.best_s], "best_u": [u.tolist() for u in res.best_u],
    }
    print(f"sequences: {res.n_sequences_total} total, {res.n_feasible} feasible; optimum {res.best_value:.17g}")
    if not args.no_admm:
        opts = _admm_opts(args, exp)
        opts = replace(opts, T_admm=max(opts.T_admm, 10 * max(opts.T_cut, 1)))
        guesses = [np.zeros((net.N, s.m)) for s in net.subsystems]
        dr = d_rout(net, x0, guesses)
        ar = sw_admm(net, x0, guesses, [r.bundle.copies for r in dr], opts)
        V = global_value(net, x0, [b.u for b in ar.bundles])
        report.update(admm_value=V, admm_residual=ar.residual)
        try:
            vt = suboptimality(V, res.best_value)
            report["suboptimality_pct"] = vt
            print(f"switching ADMM value {V:.17g} (residual {ar.residual:.3g}); suboptimality {vt:.6g} %")
        except UndefinedMetricError as exc:
            print(f"switching ADMM value {V:.17g}; suboptimality undefined: {exc}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        a = _write_json(out / "oracle.json", report)
        write_manifest(out, "oracle", args.config, None, _overrides(args, ["x0", "method", "cap"]), [a])
    return EXIT_OK


# ---------------------------------------------------------------- parser

STEPS_HELP = """steps.csv columns: t, x<i>_<a> (measured state of agent i, entry a),
u<i>_<a> (applied input), residual (Sw-ADMM residual at termination, nan when
the terminal controller acted), switches, guard (rollout fallback taken),
in_terminal, messages (neighbor messages exchanged this step), stage_cost,
J_cumulative. iters.csv columns: t, tau, agent, residual, objective,
switched, s (active switching sequence, dash separated). Floats carry 17
significant digits."""


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pwadmpc", description="Distributed MPC for networks of PWA subsystems.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="closed-loop simulation", epilog=STEPS_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    s.add_argument("config")
    s.add_argument("--mode", choices=["plain", "stable"], default="stable")
    s.add_argument("--steps", type=int)
    s.add_argument("--x0", help="JSON list of agent states; defaults to the config's experiment block")
    s.add_argument("--rho", type=float)
    s.add_argument("--tadmm", type=int)
    s.add_argument("--tcut", type=int)
    s.add_argument("--fixed-iterations", action="store_true",
                   help="always run T_admm iterations (no early exit at the residual target)")
    s.add_argument("--multi-start", default="shift", help="comma separated guess strategies: shift, zero, hold")
    s.add_argument("--out", default="out")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("terminal", help="terminal-set fixed point and invariance check")
    t.add_argument("config")
    t.add_argument("--x0-sets", help="JSON list of seed polytopes; defaults to the config's terminal sets")
    t.add_argument("--max-iter", type=int, default=100)
    t.add_argument("--samples", type=int, default=10_000)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", default="out")
    t.set_defaults(func=cmd_terminal)

    v = sub.add_parser("verify-lyapunov", help="terminal cost decrease check")
    v.add_argument("config")
    v.add_argument("--phi", help="JSON list of per-agent terminal cost matrices")
    v.add_argument("--eig-tol", type=float, default=1e-9)
    v.add_argument("--out")
    v.set_defaults(func=cmd_verify_lyapunov)

    st = sub.add_parser("study", help="randomized suboptimality study")
    st.add_argument("--seed", type=int, default=0)
    st.add_argument("--n", type=int, default=100)
    st.add_argument("--horizon", type=int, default=5)
    st.add_argument("--rho", type=float, default=1.0)
    st.add_argument("--tcut", type=int, default=100)
    st.add_argument("--oracle-method", choices=["enumerate", "branch_and_bound"], default="branch_and_bound")
    st.add_argument("--out")
    st.set_defaults(func=cmd_study)

    o = sub.add_parser("oracle", help="global optimum by switching-sequence search")
    o.add_argument("config")
    o.add_argument("--x0")
    o.add_argument("--method", choices=["enumerate", "branch_and_bound"], default="enumerate")
    o.add_argument("--cap", type=int, default=ENUMERATION_CAP)
    o.add_argument("--rho", type=float)
    o.add_argument("--tadmm", type=int)
    o.add_argument("--tcut", type=int)
    o.add_argument("--no-admm", action="store_true", help="skip the switching ADMM comparison")
    o.add_argument("--out")
    o.set_defaults(func=cmd_oracle)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; usage errors are input errors here
        return EXIT_INPUT if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, ConfigError, PolytopeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except RUNTIME_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
