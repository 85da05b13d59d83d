"""Global optimum by search over switching sequences, and the suboptimality study.

For a fixed global switching sequence the MPC problem is a convex QP in the
inputs (states follow from the sequence's linear dynamics). Two exact
searches are provided:

``enumerate``
    Solve the QP of every global sequence whose first entries are
    consistent with the measured state. Exponential; capped.
``branch_and_bound``
    Fix the modes one time step at a time. A node with modes fixed for
    steps ``0..d-1`` is bounded below by the cost of steps ``0..d-1`` plus the
    state cost at step ``d`` (all dropped terms are nonnegative), subject to
    every constraint that only involves those steps. Nodes are discarded
    when infeasible or when the bound reaches the incumbent.

Both return the same optimum; the second visits far fewer sequences.
"""

from __future__ import annotations

import itertools
import json
import math
import statistics
from dataclasses import asdict, dataclass, field

import numpy as np

from .admm import AdmmOptions, SwitchingInfeasibleError, sw_admm
from .model import (
    OutOfPartitionError, PwaMode, PwaNetwork, Subsystem, global_value, modes_containing,
)
from .polytope import DEFAULT_TOL, HPolytope, box, intersect
from .qpcore import QpSpec, QpStatus, SolverSettings, default_settings, solve_qp
from .switching import CapacityError, d_rout

__all__ = [
    "OracleResult",
    "InfeasibleProblemError",
    "UndefinedMetricError",
    "SequenceSolution",
    "solve_sequence_problem",
    "global_optimum",
    "suboptimality",
    "random_quadrant_network",
    "StudyOptions",
    "StudyStats",
    "randomized_study",
    "ENUMERATION_CAP",
    "StudyInstance",
    "run_instance",
]

ENUMERATION_CAP = 100_000


class InfeasibleProblemError(RuntimeError):
    pass


class UndefinedMetricError(ValueError):
    pass


@dataclass
class SequenceSolution:
    status: QpStatus
    value: float
    u: list[np.ndarray] | None = None
    x: list[np.ndarray] | None = None

    @property
    def ok(self) -> bool:
        return self.status is QpStatus.OPTIMAL


class _CentralQp:
    """Centralized problem with modes fixed for steps ``0..d-1``.

    Variables are the inputs ``u_i(0..d-1)`` and states ``x_i(0..d)`` of all
    agents. With ``d = N`` and the full sequence this is exactly the
    per-sequence MPC problem.
    """

    def __init__(self, net: PwaNetwork, x0, terminal_on: bool):
        self.net = net
        self.x0 = [np.asarray(v, dtype=float).reshape(-1) for v in x0]
        self.terminal_on = terminal_on

    def build(self, modes, d: int, region_steps) -> tuple[QpSpec, list, list]:
        """``modes[i][k]`` for ``k < d`` drive the dynamics; ``region_steps`` lists
        ``(k, seq_per_agent)`` region constraints to impose on ``x(k)``."""
        net, N = self.net, self.net.N
        subs = net.subsystems
        xs_idx, us_idx = [], []
        off = 0
        for s in subs:
            xs_idx.append([slice(off + k * s.n, off + (k + 1) * s.n) for k in range(d + 1)])
            off += (d + 1) * s.n
        for s in subs:
            us_idx.append([slice(off + k * s.m, off + (k + 1) * s.m) for k in range(d)])
            off += d * s.m
        nz = off
        P = np.zeros((nz, nz))
        q = np.zeros(nz)
        r0 = 0.0
        eq_rows, eq_rhs, in_rows, in_rhs = [], [], [], []

        def row(n):
            return np.zeros((n, nz))

        for i, s in enumerate(subs):
            xr = np.zeros(s.n) if s.x_ref is None else s.x_ref
            ur = np.zeros(s.m) if s.u_ref is None else s.u_ref
            for k in range(min(d + 1, N)):
                sx = xs_idx[i][k]
                P[sx, sx] += 2 * s.Q
                q[sx] -= 2 * s.Q @ xr
                r0 += float(xr @ s.Q @ xr)
                for j, Qij in s.Q_ij.items():
                    sj = xs_idx[j][k]
                    P[sj, sj] += 2 * Qij
            for k in range(d):
                su = us_idx[i][k]
                P[su, su] += 2 * s.R
                q[su] -= 2 * s.R @ ur
                r0 += float(ur @ s.R @ ur)
            if d == N and s.terminal is not None:
                sN = xs_idx[i][N]
                P[sN, sN] += 2 * s.terminal.Phi
            R_ = row(s.n)
            R_[:, xs_idx[i][0]] = np.eye(s.n)
            eq_rows.append(R_)
            eq_rhs.append(self.x0[i])
            for k in range(d):
                md = s.modes[modes[i][k]]
                R_ = row(s.n)
                R_[:, xs_idx[i][k + 1]] = np.eye(s.n)
                R_[:, xs_idx[i][k]] -= md.A
                R_[:, us_idx[i][k]] = -md.B
                for j, Aij in md.A_ij.items():
                    R_[:, xs_idx[j][k]] -= Aij
                eq_rows.append(R_)
                eq_rhs.append(md.c)
            for k in range(1, d + 1):
                if s.X.n_facets:
                    R_ = row(s.X.n_facets)
                    R_[:, xs_idx[i][k]] = s.X.H
                    in_rows.append(R_)
                    in_rhs.append(s.X.h)
                if s.coupled is not None and s.coupled.g.size:
                    G = s.coupled
                    R_ = row(G.g.size)
                    R_[:, xs_idx[i][k]] = G.G
                    for j, Gj in G.G_ij.items():
                        R_[:, xs_idx[j][k]] += Gj
                    in_rows.append(R_)
                    in_rhs.append(G.g)
            for k in range(d):
                if s.U.n_facets:
                    R_ = row(s.U.n_facets)
                    R_[:, us_idx[i][k]] = s.U.H
                    in_rows.append(R_)
                    in_rhs.append(s.U.h)
            if d == N and self.terminal_on and s.terminal is not None and s.terminal.X_T.n_facets:
                T = s.terminal.X_T
                R_ = row(T.n_facets)
                R_[:, xs_idx[i][N]] = T.H
                in_rows.append(R_)
                in_rhs.append(T.h)
        for k, seq in region_steps:
            for i, s in enumerate(subs):
                reg = s.modes[seq[i]].region
                if reg.n_facets:
                    R_ = row(reg.n_facets)
                    R_[:, xs_idx[i][k]] = reg.H
                    in_rows.append(R_)
                    in_rhs.append(reg.h)
        spec = QpSpec(
            P, q, r0,
            np.vstack(eq_rows), np.concatenate(eq_rhs),
            np.vstack(in_rows) if in_rows else None,
            np.concatenate(in_rhs) if in_rhs else None,
        )
        return spec, xs_idx, us_idx


def _initial_ok(net, x0):
    """Step-0 constraints are constants of the measured state."""
    for i, s in enumerate(net.subsystems):
        if s.X.n_facets and np.any(s.X.H @ x0[i] > s.X.h + DEFAULT_TOL):
            return False
        if s.coupled is not None and s.coupled.g.size:
            if np.any(s.coupled.value(x0[i], {j: x0[j] for j in s.coupled.G_ij}) > DEFAULT_TOL):
                return False
    return True


def solve_sequence_problem(net: PwaNetwork, x0, seqs, terminal_on: bool = False,
                           settings: SolverSettings | None = None,
                           feasibility_only: bool = False) -> SequenceSolution:
    """Centralized convex problem for one global switching sequence (closed regions)."""
    settings = settings or default_settings()
    x0 = [np.asarray(v, dtype=float).reshape(-1) for v in x0]
    N = net.N
    for i, s in enumerate(net.subsystems):
        if not np.all(s.modes[seqs[i][0]].region.H @ x0[i] <= s.modes[seqs[i][0]].region.h + DEFAULT_TOL):
            return SequenceSolution(QpStatus.INFEASIBLE, math.inf)
    if not _initial_ok(net, x0):
        return SequenceSolution(QpStatus.INFEASIBLE, math.inf)
    cq = _CentralQp(net, x0, terminal_on)
    regions = [(k, [seqs[i][k] for i in range(net.M)]) for k in range(1, N + 1)]
    spec, xs_idx, us_idx = cq.build(seqs, N, regions)
    if feasibility_only:
        spec = QpSpec(np.eye(spec.n), np.zeros(spec.n), 0.0, spec.Aeq, spec.beq, spec.Ain, spec.bin)
    sol = solve_qp(spec, settings)
    if not sol.ok:
        return SequenceSolution(sol.status, math.inf)
    xs = [np.array([sol.z[sl] for sl in xs_idx[i]]) for i in range(net.M)]
    us = [np.array([sol.z[sl] for sl in us_idx[i]]).reshape(N, net.subsystems[i].m) for i in range(net.M)]
    return SequenceSolution(QpStatus.OPTIMAL, sol.objective, us, xs)


@dataclass
class OracleResult:
    best_s: list[tuple[int, ...]]
    best_u: list[np.ndarray]
    best_value: float
    n_sequences_total: int
    n_feasible: int
    method: str = "enumerate"
    n_solved: int = 0
    best_x: list[np.ndarray] | None = None


def _count_total(net):
    total = 1
    for s in net.subsystems:
        total *= s.L ** (net.N + 1)
    return total


def _enumerate(net, x0, terminal_on, settings, cap):
    total = _count_total(net)
    if total > cap:
        raise CapacityError(f"{total} global switching sequences exceed the enumeration cap {cap}")
    per_agent = [list(itertools.product(range(s.L), repeat=net.N + 1)) for s in net.subsystems]
    best = None
    n_feas = n_solved = 0
    for combo in itertools.product(*per_agent):
        # sequences whose first region excludes the measured state are empty
        if any(not np.all(net.subsystems[i].modes[combo[i][0]].region.H @ x0[i]
                          <= net.subsystems[i].modes[combo[i][0]].region.h + DEFAULT_TOL)
               for i in range(net.M)):
            continue
        sol = solve_sequence_problem(net, x0, combo, terminal_on, settings)
        n_solved += 1
        if not sol.ok:
            continue
        n_feas += 1
        if best is None or sol.value < best[0]:
            best = (sol.value, combo, sol)
    if best is None:
        raise InfeasibleProblemError("no global switching sequence gives a feasible problem")
    v, combo, sol = best
    return OracleResult([tuple(c) for c in combo], sol.u, v, total, n_feas, "enumerate", n_solved, sol.x)


def _branch_and_bound(net, x0, terminal_on, settings, node_cap):
    N, M = net.N, net.M
    subs = net.subsystems
    cq = _CentralQp(net, x0, terminal_on)
    if not _initial_ok(net, x0):
        raise InfeasibleProblemError("measured state violates the state constraints")
    first = [modes_containing(s, x0[i]) for i, s in enumerate(subs)]
    if any(not f for f in first):
        bad = next(i for i, f in enumerate(first) if not f)
        raise OutOfPartitionError(bad, x0[bad], 0)
    best = [math.inf, None, None]
    stats = {"solved": 0, "feasible_leaves": 0}

    def solve(modes, d):
        regions = [(k, [modes[i][k] for i in range(M)]) for k in range(1, d)]
        spec, xs_idx, us_idx = cq.build(modes, d, regions)
        stats["solved"] += 1
        if stats["solved"] > node_cap:
            raise CapacityError(f"branch and bound exceeded {node_cap} node solves")
        sol = solve_qp(spec, settings)
        return sol, xs_idx, us_idx

    def children(modes):
        per_agent = [range(s.L) for s in subs]
        return [tuple(tuple(modes[i]) + (c[i],) for i in range(M)) for c in itertools.product(*per_agent)]

    def prunable(obj):
        return obj >= best[0] - 1e-12 * (1.0 + abs(best[0]))

    def expand(modes, d, node):
        # modes fixed for steps 0..d-1 (d >= 1); node is the solved relaxation
        sol, xs_idx, us_idx = node
        if prunable(sol.objective):
            return
        if d == N:
            stats["feasible_leaves"] += 1
            us = [np.array([sol.z[sl] for sl in us_idx[i]]).reshape(N, subs[i].m) for i in range(M)]
            xs = [np.array([sol.z[sl] for sl in xs_idx[i]]) for i in range(M)]
            # x(N) lies in X, which the closed regions cover
            last = []
            for i, s in enumerate(subs):
                cands = modes_containing(s, xs[i][N], 1e-7)
                last.append(cands[0] if cands else 0)
            best[:] = [sol.objective, [tuple(modes[i]) + (last[i],) for i in range(M)], (us, xs)]
            return
        kids = []
        for child in children(modes):
            cnode = solve(child, d + 1)
            if cnode[0].ok:
                kids.append((cnode[0].objective, child, cnode))
            elif cnode[0].status is not QpStatus.INFEASIBLE:
                raise InfeasibleProblemError(f"node solve ended with status {cnode[0].status.value}")
        kids.sort(key=lambda t: t[0])
        for _, child, cnode in kids:
            expand(child, d + 1, cnode)

    roots = []
    for combo in itertools.product(*first):
        modes = tuple((c,) for c in combo)
        node = solve(modes, 1)
        if node[0].ok:
            roots.append((node[0].objective, modes, node))
        elif node[0].status is not QpStatus.INFEASIBLE:
            raise InfeasibleProblemError(f"node solve ended with status {node[0].status.value}")
    roots.sort(key=lambda t: t[0])
    for _, modes, node in roots:
        expand(modes, 1, node)
    if best[1] is None:
        raise InfeasibleProblemError("no global switching sequence gives a feasible problem")
    us, xs = best[2]
    return OracleResult(best[1], us, best[0], _count_total(net), stats["feasible_leaves"],
                        "branch_and_bound", stats["solved"], xs)


def global_optimum(net: PwaNetwork, x0, method: str = "enumerate", terminal_on: bool = False,
                   cap: int = ENUMERATION_CAP, settings: SolverSettings | None = None) -> OracleResult:
    """Exact global minimizer of the centralized MPC problem.

    Parameters
    ----------
    method : {"enumerate", "branch_and_bound"}
        ``enumerate`` refuses instances with more than ``cap`` global
        sequences; ``branch_and_bound`` uses ``cap`` as a limit on QP solves.
    """
    settings = settings or default_settings()
    x0 = [np.asarray(v, dtype=float).reshape(-1) for v in x0]
    if method == "enumerate":
        return _enumerate(net, x0, terminal_on, settings, cap)
    if method == "branch_and_bound":
        return _branch_and_bound(net, x0, terminal_on, settings, cap)
    raise ValueError(f"unknown oracle method {method!r}")


def suboptimality(V: float, Vstar: float, tol: float = 1e-12) -> float:
    """Percentage excess cost ``100 (V - V*) / V*``."""
    if not Vstar > tol:
        raise UndefinedMetricError(f"optimal value {Vstar} too small for a relative metric")
    return 100.0 * (V - Vstar) / Vstar


# ------------------------------------------------------------------ study

QUADRANTS = [(1, 1), (-1, 1), (-1, -1), (1, -1)]


def quadrant_regions(bound: float | None = None) -> list[HPolytope]:
    """Closed quadrants, counterclockwise from the positive orthant.

    Unbounded by default so that dynamics stay defined for rollouts that
    leave the state constraints.
    """
    out = []
    for sx, sy in QUADRANTS:
        q = HPolytope(np.array([[-sx, 0.0], [0.0, -sy]], dtype=float), np.zeros(2))
        out.append(q if bound is None else intersect(q, box([-bound] * 2, [bound] * 2), prune=True))
    return out


def random_quadrant_network(rng: np.random.Generator, N: int = 5, M: int = 2,
                            entry_bound: float = 1.5, coupling_bound: float = 0.1,
                            x_bound: float = 10.0, u_bound: float = 1.0,
                            single_region: bool = False) -> PwaNetwork:
    """Random network of 2-state, 1-input agents on the four closed quadrants.

    Every agent is coupled to every other; one coupling matrix per agent pair
    is shared by all of the agent's regions. ``single_region`` gives every
    agent one linear mode on the whole plane (the convex case).
    """
    regions = [HPolytope.universe(2)] if single_region else quadrant_regions()
    neighbors = {i: [j for j in range(M) if j != i] for i in range(M)}
    subs = []
    for i in range(M):
        coupling = {j: rng.uniform(-coupling_bound, coupling_bound, size=(2, 2)) for j in neighbors[i]}
        modes = []
        for reg in regions:
            A = rng.uniform(-entry_bound, entry_bound, size=(2, 2))
            B = rng.uniform(-entry_bound, entry_bound, size=(2, 1))
            modes.append(PwaMode(A, B, np.zeros(2), dict(coupling), reg))
        subs.append(Subsystem(
            n=2, m=1, modes=modes,
            X=box([-x_bound] * 2, [x_bound] * 2), U=box([-u_bound], [u_bound]),
            Q=np.eye(2), R=np.eye(1),
        ))
    return PwaNetwork(subs, neighbors, N)


@dataclass(frozen=True)
class StudyOptions:
    N: int = 5
    rho: float = 1.0
    T_cut: int = 100
    max_iter: int = 1000
    target_residual: float = 0.01
    oracle_method: str = "branch_and_bound"
    oracle_cap: int = 200_000
    # slack allowed on constraints when evaluating the ADMM inputs on the true dynamics
    value_tol: float = DEFAULT_TOL
    state_attempts: int = 20


@dataclass
class StudyStats:
    seed: int
    n: int
    samples: list[float] = field(default_factory=list)
    skipped: int = 0
    skip_reasons: dict[str, int] = field(default_factory=dict)
    opts: dict = field(default_factory=dict)

    def _agg(self, fn):
        return fn(self.samples) if self.samples else None

    @property
    def median(self):
        return self._agg(statistics.median)

    @property
    def mean(self):
        return self._agg(statistics.fmean)

    @property
    def std(self):
        return statistics.pstdev(self.samples) if len(self.samples) > 1 else (0.0 if self.samples else None)

    @property
    def max(self):
        return self._agg(max)

    @property
    def min(self):
        return self._agg(min)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "n": self.n, "median": self.median, "mean": self.mean,
            "std": self.std, "max": self.max, "min": self.min, "skipped": self.skipped,
            "skip_reasons": dict(sorted(self.skip_reasons.items())), "opts": self.opts,
            "samples": self.samples,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


@dataclass
class StudyInstance:
    net: PwaNetwork
    x: list[np.ndarray]
    oracle: OracleResult | None
    V: float | None = None
    Vtilde: float | None = None
    admm_residual: float | None = None
    skip: str | None = None


def run_instance(seed: int, idx: int, opts: StudyOptions, settings=None) -> StudyInstance:
    rng = np.random.default_rng([seed, idx])
    net = random_quadrant_network(rng, N=opts.N)
    oracle = None
    for _ in range(opts.state_attempts):
        x = [rng.uniform(-10.0, 10.0, size=2) for _ in range(net.M)]
        try:
            oracle = global_optimum(net, x, opts.oracle_method, cap=opts.oracle_cap, settings=settings)
            break
        except InfeasibleProblemError:
            continue
        except CapacityError:
            return StudyInstance(net, x, None, skip="oracle_capacity")
    if oracle is None:
        return StudyInstance(net, x, None, skip="no_feasible_state")
    guesses = [np.zeros((net.N, s.m)) for s in net.subsystems]
    dr = d_rout(net, x, guesses)
    aopts = AdmmOptions(rho=opts.rho, T_admm=opts.max_iter, T_cut=opts.T_cut,
                        target_residual=opts.target_residual, early_stop=True)
    try:
        res = sw_admm(net, x, guesses, [r.bundle.copies for r in dr], aopts, settings)
    except SwitchingInfeasibleError:
        return StudyInstance(net, x, oracle, skip="admm_infeasible")
    except CapacityError:
        return StudyInstance(net, x, oracle, skip="switching_capacity")
    inst = StudyInstance(net, x, oracle, admm_residual=res.residual)
    if res.residual > opts.target_residual:
        inst.skip = "admm_not_converged"
        return inst
    u = [b.u for b in res.bundles]
    try:
        V = global_value(net, x, u, tol=opts.value_tol)
    except OutOfPartitionError:
        V = math.inf
    inst.V = V
    if not math.isfinite(V):
        inst.skip = "admm_solution_infeasible"
        return inst
    try:
        inst.Vtilde = suboptimality(V, oracle.best_value)
    except UndefinedMetricError:
        inst.skip = "zero_optimal_cost"
    return inst


def randomized_study(seed: int, n_networks: int, opts: StudyOptions | None = None,
                     settings: SolverSettings | None = None, instances: list | None = None) -> StudyStats:
    """Suboptimality of switching ADMM against the exact optimum on random networks.

    Instance ``k`` draws from ``default_rng([seed, k])``, so any subset of
    instances can be reproduced on its own.
    """
    opts = opts or StudyOptions()
    stats = StudyStats(seed, n_networks, opts=asdict(opts))
    for k in range(n_networks):
        inst = run_instance(seed, k, opts, settings)
        if instances is not None:
            instances.append(inst)
        if inst.skip:
            stats.skipped += 1
            stats.skip_reasons[inst.skip] = stats.skip_reasons.get(inst.skip, 0) + 1
        else:
            stats.samples.append(inst.Vtilde)
    return stats
