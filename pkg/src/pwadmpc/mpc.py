"""Closed-loop distributed MPC: plain and terminal-ingredient (stable) variants."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .admm import LOCAL_BACKEND, AdmmOptions, AdmmResult, SwitchingInfeasibleError, sw_admm
from .model import PwaNetwork, find_mode, local_cost, stage_cost, step
from .polytope import DEFAULT_TOL, contains
from .qpcore import SolverSettings, default_settings
from .switching import AgentBundle, d_rout, eval_switching

__all__ = [
    "ControllerConfig",
    "StepRecord",
    "ControllerMemory",
    "SimulationResult",
    "GuardError",
    "shift_guess",
    "terminal_inputs",
    "dmpc_step",
    "stable_dmpc_step",
    "simulate",
    "write_steps_csv",
]

log = logging.getLogger(__name__)

GUESS_STRATEGIES = ("shift", "zero", "hold")


class GuardError(RuntimeError):
    pass


@dataclass(frozen=True)
class ControllerConfig:
    """Controller settings.

    ``multi_start`` lists guess strategies run side by side each step:
    ``shift`` (shifted previous solution; zeros at the first step), ``zero``
    and ``hold`` (previous first input repeated).
    """

    mode: str = "plain"
    admm: AdmmOptions = field(default_factory=AdmmOptions)
    multi_start: tuple[str, ...] = ("shift",)
    terminal_on: bool | None = None
    guard_rel_tol: float = 1e-9
    # stable mode: fall back to the rollout bundle if Sw-ADMM raises
    fallback_on_error: bool = False
    check_weak_feasibility: bool = True
    settings: SolverSettings | None = None

    def __post_init__(self):
        if self.mode not in ("plain", "stable"):
            raise ValueError("mode must be 'plain' or 'stable'")
        for s in self.multi_start:
            if s not in GUESS_STRATEGIES:
                raise ValueError(f"unknown guess strategy {s!r}")
        if not self.multi_start:
            raise ValueError("at least one guess strategy is required")

    @property
    def use_terminal(self) -> bool:
        return self.mode == "stable" if self.terminal_on is None else self.terminal_on

    def admm_opts(self) -> AdmmOptions:
        return replace(self.admm, terminal_on=self.use_terminal)


@dataclass
class StepRecord:
    t: int
    x: list[np.ndarray]
    u: list[np.ndarray]
    F: list[float] = field(default_factory=list)
    F_dr: list[float] = field(default_factory=list)
    residual: float = 0.0
    switches: int = 0
    iterations: int = 0
    guard_triggered: bool = False
    in_terminal: bool = False
    messages: int = 0
    stage_cost: float = 0.0
    J_cumulative: float = 0.0
    u_seq: list[np.ndarray] | None = None
    x_pred: list[np.ndarray] | None = None
    guess: list[np.ndarray] | None = None
    trace: list[dict] = field(default_factory=list)


@dataclass
class ControllerMemory:
    u_prev: list[np.ndarray] | None = None
    x_prev: list[np.ndarray] | None = None
    first_guess: list[np.ndarray] | None = None
    entered_terminal: bool = False


def _zeros(net: PwaNetwork):
    return [np.zeros((net.N, s.m)) for s in net.subsystems]


def terminal_inputs(net: PwaNetwork, x, tol: float = DEFAULT_TOL) -> list[np.ndarray]:
    """``u_i = K_i^l x_i`` with ``l`` the lowest origin region whose closure holds ``x_i``."""
    out = []
    for i, sub in enumerate(net.subsystems):
        if sub.terminal is None:
            raise GuardError(f"subsystem {i} has no terminal ingredients")
        l = _terminal_region(sub, x[i], tol)
        if l is None:
            raise GuardError(f"subsystem {i}: {np.asarray(x[i]).tolist()} lies in no terminal region")
        out.append(sub.terminal.gains[l] @ np.asarray(x[i], dtype=float))
    return out


def _terminal_region(sub, x, tol):
    for l in sub.origin_modes(tol):
        if l in sub.terminal.gains and contains(sub.modes[l].region, x, tol):
            return l
    return None


def shift_guess(net: PwaNetwork, prev_u, prev_x=None, stable: bool = False,
                tol: float = DEFAULT_TOL) -> list[np.ndarray]:
    """Warm start from the previous solution.

    Plain: drop the first input and repeat the last one. Stable: drop the
    first input and append the terminal control at the predicted final state.
    """
    out = []
    N = net.N
    for i, sub in enumerate(net.subsystems):
        u = np.asarray(prev_u[i], dtype=float).reshape(N, sub.m)
        if stable:
            if prev_x is None:
                raise GuardError("stable shift needs the previous predicted trajectory")
            xN = np.asarray(prev_x[i], dtype=float).reshape(N + 1, sub.n)[N]
            if sub.terminal is None:
                raise GuardError(f"subsystem {i} has no terminal ingredients")
            l = _terminal_region(sub, xN, tol)
            if l is None:
                raise GuardError(f"subsystem {i}: predicted final state {xN.tolist()} in no terminal region")
            tail = (sub.terminal.gains[l] @ xN).reshape(1, sub.m)
        else:
            tail = u[-1:].copy()
        out.append(np.vstack([u[1:], tail]))
    return out


def _guess(strategy, net, memory, stable):
    if strategy == "zero" or memory.u_prev is None:
        if memory.u_prev is None and memory.first_guess is not None and strategy == "shift":
            return [np.asarray(g, dtype=float).reshape(net.N, s.m) for g, s in zip(memory.first_guess, net.subsystems)]
        return _zeros(net)
    if strategy == "hold":
        return [np.repeat(u[:1], net.N, axis=0) for u in memory.u_prev]
    return shift_guess(net, memory.u_prev, memory.x_prev, stable)


def _weakly_feasible(net, x, guesses, opts, settings):
    """Does the sequence generated by ``guesses`` give a feasible centralized problem?"""
    from .oracle import solve_sequence_problem

    dr = d_rout(net, x, guesses)
    seqs = [eval_switching(net, i, x[i], guesses[i], dr[i].bundle.copies, opts.switch_tol,
                           opts.max_branches)[0] for i in range(net.M)]
    return solve_sequence_problem(net, x, seqs, opts.terminal_on, settings, feasibility_only=True).ok


@dataclass
class _Run:
    guess: list[np.ndarray]
    dr: list
    res: AdmmResult


def _run_starts(net, x, guesses_list, cfg: ControllerConfig, record_trace):
    opts = cfg.admm_opts()
    settings = cfg.settings or default_settings(LOCAL_BACKEND)
    runs, errors = [], []
    for guesses in guesses_list:
        dr = d_rout(net, x, guesses)
        try:
            res = sw_admm(net, x, guesses, [r.bundle.copies for r in dr], opts, settings, record_trace)
        except SwitchingInfeasibleError as exc:
            errors.append((exc, guesses, dr))
            continue
        runs.append(_Run(guesses, dr, res))
    return runs, errors


def _pick(runs, target):
    good = [r for r in runs if r.res.residual <= target]
    pool = good or runs
    # ties keep the earliest strategy
    return min(enumerate(pool), key=lambda kv: (sum(kv[1].res.F), kv[0]))[1]


def dmpc_step(net: PwaNetwork, x, guesses_list, cfg: ControllerConfig, t: int = 0,
              record_trace: bool = False):
    """One step of plain distributed MPC.

    Runs the rollout and Sw-ADMM for every guess set in ``guesses_list`` and
    keeps the lowest-cost run among those meeting the residual target.

    Returns ``(u0, bundles, record)``.
    """
    runs, errors = _run_starts(net, x, guesses_list, cfg, record_trace)
    if not runs:
        raise errors[0][0]
    best = _pick(runs, cfg.admm.target_residual)
    bundles = best.res.bundles
    u0 = [b.u[0].copy() for b in bundles]
    rec = StepRecord(
        t=t, x=[np.asarray(v, dtype=float).copy() for v in x], u=u0,
        F=list(best.res.F), F_dr=[r.F_dr for r in best.dr], residual=best.res.residual,
        switches=len(best.res.switch_log), iterations=best.res.iterations,
        messages=sum(r.res.messages for r in runs) + len(guesses_list) * (net.N + 1) * len(net.edges()),
        u_seq=[b.u.copy() for b in bundles], x_pred=[b.x.copy() for b in bundles],
        guess=best.guess, trace=best.res.trace,
    )
    return u0, bundles, rec


def stable_dmpc_step(net: PwaNetwork, x, memory: ControllerMemory, cfg: ControllerConfig,
                     t: int = 0, record_trace: bool = False):
    """One step of the stabilizing controller.

    Inside the global terminal set the local gains are applied directly.
    Otherwise a warm start (known guess at the first call, shifted solution
    plus terminal control afterwards) seeds the rollout and Sw-ADMM, and the
    ADMM result is discarded in favor of the rollout whenever some agent's
    local cost got worse than its rollout cost.

    Returns ``(u0, record, memory)``.
    """
    if not net.has_terminal:
        raise GuardError("stable mode needs terminal ingredients on every subsystem")
    x = [np.asarray(v, dtype=float).reshape(-1) for v in x]
    if all(contains(s.terminal.X_T, x[i]) for i, s in enumerate(net.subsystems)):
        u0 = terminal_inputs(net, x)
        memory.entered_terminal = True
        rec = StepRecord(t=t, x=[v.copy() for v in x], u=u0, in_terminal=True)
        return u0, rec, memory
    if memory.entered_terminal:
        log.warning("t=%d: state left the terminal set; falling back to the optimization branch", t)
    guesses_list = [_guess(s, net, memory, stable=True) for s in cfg.multi_start]
    settings = cfg.settings or default_settings()
    if memory.u_prev is None and cfg.check_weak_feasibility:
        if not _weakly_feasible(net, x, guesses_list[0], cfg.admm_opts(), settings):
            raise GuardError("initial guess is not weakly feasible")
    runs, errors = _run_starts(net, x, guesses_list, cfg, record_trace)
    if runs:
        best = _pick(runs, cfg.admm.target_residual)
        dr, res = best.dr, best.res
        bundles = res.bundles
        F = list(res.F)
    elif cfg.fallback_on_error:
        exc, guesses, dr = errors[0]
        log.warning("t=%d: %s; using the rollout", t, exc)
        best, res, bundles, F = None, None, None, None
    else:
        raise errors[0][0]
    F_dr = [r.F_dr for r in dr]
    guard = bundles is None or any(
        Fi > Fd + cfg.guard_rel_tol * (1.0 + abs(Fd)) for Fi, Fd in zip(F, F_dr))
    if guard:
        bundles = [r.bundle for r in dr]
        F = list(F_dr)
    memory.u_prev = [b.u.copy() for b in bundles]
    memory.x_prev = [b.x.copy() for b in bundles]
    u0 = [b.u[0].copy() for b in bundles]
    rec = StepRecord(
        t=t, x=[v.copy() for v in x], u=u0, F=F, F_dr=F_dr,
        residual=res.residual if res is not None else math.nan,
        switches=len(res.switch_log) if res is not None else 0,
        iterations=res.iterations if res is not None else 0,
        guard_triggered=guard, in_terminal=False,
        messages=(sum(r.res.messages for r in runs) + len(guesses_list) * (net.N + 1) * len(net.edges())),
        u_seq=[b.u.copy() for b in bundles], x_pred=[b.x.copy() for b in bundles],
        guess=(best.guess if best is not None else errors[0][1]),
        trace=res.trace if res is not None else [],
    )
    return u0, rec, memory


@dataclass
class SimulationResult:
    records: list[StepRecord]
    x: list[np.ndarray]          # per agent, shape (T+1, n_i)
    J: float

    def final_state(self) -> list[np.ndarray]:
        return [xi[-1] for xi in self.x]


def plant_step(net: PwaNetwork, x, u, tol: float = DEFAULT_TOL) -> list[np.ndarray]:
    """True one-step evolution of all agents (lowest-index mode at boundaries)."""
    out = []
    for i, sub in enumerate(net.subsystems):
        l = find_mode(sub, x[i], tol, i)
        out.append(step(net, i, x[i], u[i], {j: x[j] for j in net.nb(i)}, l))
    return out


def simulate(net: PwaNetwork, x0, cfg: ControllerConfig, T_steps: int,
             first_guess=None, record_trace: bool = False) -> SimulationResult:
    """Closed-loop run of ``T_steps`` controller steps from ``x0``.

    ``J`` accumulates the stage costs of the applied inputs over the executed steps.
    """
    x = [np.asarray(v, dtype=float).reshape(-1) for v in x0]
    for i, sub in enumerate(net.subsystems):
        find_mode(sub, x[i], DEFAULT_TOL, i, 0)
    memory = ControllerMemory(first_guess=first_guess)
    records = []
    xs = [[v.copy()] for v in x]
    J = 0.0
    for t in range(T_steps):
        if cfg.mode == "stable":
            u0, rec, memory = stable_dmpc_step(net, x, memory, cfg, t, record_trace)
        else:
            guesses_list = [_guess(s, net, memory, stable=False) for s in cfg.multi_start]
            u0, bundles, rec = dmpc_step(net, x, guesses_list, cfg, t, record_trace)
            memory.u_prev = rec.u_seq
            memory.x_prev = rec.x_pred
            if net.has_terminal:
                rec.in_terminal = all(contains(s.terminal.X_T, x[i]) for i, s in enumerate(net.subsystems))
        rec.stage_cost = sum(
            stage_cost(sub, x[i], u0[i], {j: x[j] for j in sub.Q_ij}) for i, sub in enumerate(net.subsystems))
        J += rec.stage_cost
        rec.J_cumulative = J
        records.append(rec)
        x = plant_step(net, x, u0)
        for i in range(net.M):
            xs[i].append(x[i].copy())
    return SimulationResult(records, [np.array(v) for v in xs], J)


def steps_columns(net: PwaNetwork) -> list[str]:
    cols = ["t"]
    cols += [f"x{i}_{a}" for i, s in enumerate(net.subsystems) for a in range(s.n)]
    cols += [f"u{i}_{a}" for i, s in enumerate(net.subsystems) for a in range(s.m)]
    cols += ["residual", "switches", "guard", "in_terminal", "messages", "stage_cost", "J_cumulative"]
    return cols


def _f(v) -> str:
    return format(float(v), ".17g")


def write_steps_csv(path, net: PwaNetwork, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(steps_columns(net))
        for r in records:
            row = [r.t]
            row += [_f(v) for xi in r.x for v in xi]
            row += [_f(v) for ui in r.u for v in np.atleast_1d(ui)]
            row += [_f(r.residual), r.switches, str(r.guard_triggered).lower(),
                    str(r.in_terminal).lower(), r.messages, _f(r.stage_cost), _f(r.J_cumulative)]
            w.writerow(row)
