"""Consensus ADMM over switching sequences.

Each agent ``i`` owns ``y_i = (x~_i, u_i)`` where ``x~_i`` stacks its own
predicted trajectory and its copies of the neighbor trajectories. One round
is: local QP, exchange of copies, averaging into ``z``, multiplier update.
Between rounds, while ``tau < T_cut``, each agent re-evaluates the switching
sequences generated by its latest local solution and moves to a different
one when available.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .model import ConfigError, PwaNetwork, local_cost
from .polytope import DEFAULT_TOL
from .qpcore import QpSpec, QpStatus, SolverSettings, default_settings, solve_qp
from .switching import DEFAULT_MAX_BRANCHES, AgentBundle, eval_switching

__all__ = [
    "AdmmOptions",
    "AdmmState",
    "AdmmResult",
    "SwitchingInfeasibleError",
    "AssumptionViolationError",
    "LocalProblem",
    "build_local_qp",
    "admm_round",
    "residual",
    "sw_admm",
    "write_trace_csv",
]

SWITCH_TOL = DEFAULT_TOL
# Local QPs default to the interior-point backend. Active-set solutions land
# on every active region facet up to rounding, so eval-switching would see a
# boundary contact at each of them and bounce between adjacent sequences.
LOCAL_BACKEND = "clarabel"


class SwitchingInfeasibleError(RuntimeError):
    def __init__(self, agent: int, seq, status, tau: int):
        self.agent, self.seq, self.status, self.tau = agent, tuple(seq), status, tau
        super().__init__(
            f"local problem of agent {agent} is {getattr(status, 'value', status)} "
            f"under switching sequence {'-'.join(map(str, seq))} (iteration {tau})"
        )


class AssumptionViolationError(SwitchingInfeasibleError):
    """Local infeasibility after the switching sequences were frozen."""


@dataclass(frozen=True)
class AdmmOptions:
    rho: float = 1.0
    T_admm: int = 50
    T_cut: int = 50
    target_residual: float = 0.01
    early_stop: bool = True
    terminal_on: bool = False
    switch_tol: float = SWITCH_TOL
    max_branches: int = DEFAULT_MAX_BRANCHES
    # linear penalty on per-step slack of the local state constraints; None = hard
    soft_state_penalty: float | None = None

    def __post_init__(self):
        if not self.rho >= 0:
            raise ValueError("rho must be nonnegative")
        if self.T_admm < 0 or self.T_cut < 0:
            raise ValueError("iteration counts must be nonnegative")


class LocalProblem:
    """Builds agent ``i``'s local QP for a fixed measured state.

    Cost terms and sequence-independent constraints are assembled once; the
    dynamics and region rows are rebuilt by :meth:`set_sequence`.
    """

    def __init__(self, net: PwaNetwork, i: int, x_i, terminal_on: bool = False,
                 soft_state_penalty: float | None = None):
        self.net, self.i = net, i
        sub = net.subsystems[i]
        self.sub = sub
        N, n, m = net.N, sub.n, sub.m
        self.N, self.n, self.m = N, n, m
        self.nbrs = list(net.nb(i))
        self.x0 = np.asarray(x_i, dtype=float).reshape(-1)
        if terminal_on and sub.terminal is None:
            raise ConfigError(f"terminal constraint requested but subsystem {i} has no terminal set")
        self.terminal_on = terminal_on

        layout = {}
        off = 0
        layout["x"] = slice(off, off + (N + 1) * n)
        off += (N + 1) * n
        for j in self.nbrs:
            nj = net.subsystems[j].n
            layout[f"copy:{j}"] = slice(off, off + (N + 1) * nj)
            off += (N + 1) * nj
        self.n_tilde = off
        layout["u"] = slice(off, off + N * m)
        off += N * m
        self.soft = soft_state_penalty is not None and sub.X.n_facets > 0
        if self.soft:
            layout["slack"] = slice(off, off + N + 1)
            off += N + 1
        self.layout = layout
        self.nz = off

        # cost of F_i as 0.5 z'Pz + q'z + r0
        P = np.zeros((off, off))
        q = np.zeros(off)
        r0 = 0.0
        xr = np.zeros(n) if sub.x_ref is None else sub.x_ref
        ur = np.zeros(m) if sub.u_ref is None else sub.u_ref
        for k in range(N):
            sx, su = self.xs(k), self.us(k)
            P[sx, sx] += 2 * sub.Q
            q[sx] -= 2 * sub.Q @ xr
            r0 += float(xr @ sub.Q @ xr)
            P[su, su] += 2 * sub.R
            q[su] -= 2 * sub.R @ ur
            r0 += float(ur @ sub.R @ ur)
            for j, Qij in sub.Q_ij.items():
                sc = self.cs(j, k)
                P[sc, sc] += 2 * Qij
        if sub.terminal is not None:
            sN = self.xs(N)
            P[sN, sN] += 2 * sub.terminal.Phi
        if self.soft:
            q[layout["slack"]] = soft_state_penalty
        self.P_F, self.q_F, self.r0_F = P, q, r0

        rows, rhs = [], []

        def add(block_rows, b):
            rows.append(block_rows)
            rhs.append(b)

        X, U = sub.X, sub.U
        for k in range(N + 1):
            if X.n_facets:
                R_ = np.zeros((X.n_facets, off))
                R_[:, self.xs(k)] = X.H
                if self.soft:
                    R_[:, layout["slack"].start + k] = -1.0
                add(R_, X.h)
            if sub.coupled is not None and sub.coupled.g.size:
                G = sub.coupled
                R_ = np.zeros((G.g.size, off))
                R_[:, self.xs(k)] = G.G
                for j, Gj in G.G_ij.items():
                    R_[:, self.cs(j, k)] = Gj
                add(R_, G.g)
        for k in range(N):
            if U.n_facets:
                R_ = np.zeros((U.n_facets, off))
                R_[:, self.us(k)] = U.H
                add(R_, U.h)
        if terminal_on and sub.terminal.X_T.n_facets:
            T = sub.terminal.X_T
            R_ = np.zeros((T.n_facets, off))
            R_[:, self.xs(N)] = T.H
            add(R_, T.h)
        if self.soft:
            R_ = np.zeros((N + 1, off))
            R_[:, layout["slack"]] = -np.eye(N + 1)
            add(R_, np.zeros(N + 1))
        self.Ain_static = np.vstack(rows) if rows else np.zeros((0, off))
        self.bin_static = np.concatenate(rhs) if rhs else np.zeros(0)
        self.seq = None

    # index helpers -------------------------------------------------------
    def xs(self, k: int) -> slice:
        return slice(k * self.n, (k + 1) * self.n)

    def cs(self, j: int, k: int) -> slice:
        nj = self.net.subsystems[j].n
        base = self.layout[f"copy:{j}"].start
        return slice(base + k * nj, base + (k + 1) * nj)

    def us(self, k: int) -> slice:
        base = self.layout["u"].start
        return slice(base + k * self.m, base + (k + 1) * self.m)

    def set_sequence(self, seq) -> None:
        seq = tuple(int(l) for l in seq)
        if len(seq) != self.N + 1:
            raise ValueError(f"switching sequence must have length {self.N + 1}")
        sub, N, n, nz = self.sub, self.N, self.n, self.nz
        Aeq = np.zeros(((N + 1) * n, nz))
        beq = np.zeros((N + 1) * n)
        Aeq[:n, self.xs(0)] = np.eye(n)
        beq[:n] = self.x0
        for k in range(N):
            md = sub.modes[seq[k]]
            r = slice((k + 1) * n, (k + 2) * n)
            Aeq[r, self.xs(k + 1)] = np.eye(n)
            Aeq[r, self.xs(k)] = -md.A
            Aeq[r, self.us(k)] = -md.B
            for j, Aij in md.A_ij.items():
                Aeq[r, self.cs(j, k)] = -Aij
            beq[r] = md.c
        # x(0) is pinned, so its region rows are constants; membership of the
        # measured state was settled when the sequence was generated
        rows, rhs = [], []
        for k in range(1, N + 1):
            reg = sub.modes[seq[k]].region
            if reg.n_facets:
                R_ = np.zeros((reg.n_facets, nz))
                R_[:, self.xs(k)] = reg.H
                rows.append(R_)
                rhs.append(reg.h)
        self.Aeq, self.beq = Aeq, beq
        self.Ain = np.vstack([self.Ain_static] + rows)
        self.bin = np.concatenate([self.bin_static] + rhs)
        self.seq = seq

    def spec(self, lam=None, z_tilde=None, rho: float = 0.0) -> QpSpec:
        if self.seq is None:
            raise RuntimeError("set_sequence must be called first")
        P = self.P_F.copy()
        q = self.q_F.copy()
        r0 = self.r0_F
        nt = self.n_tilde
        if lam is not None:
            q[:nt] += lam
        if rho:
            zt = np.zeros(nt) if z_tilde is None else z_tilde
            P[np.arange(nt), np.arange(nt)] += rho
            q[:nt] -= rho * zt
            r0 += 0.5 * rho * float(zt @ zt)
        return QpSpec(P, q, r0, self.Aeq, self.beq, self.Ain, self.bin, dict(self.layout))

    def unpack(self, z: np.ndarray) -> AgentBundle:
        N = self.N
        x = z[self.layout["x"]].reshape(N + 1, self.n).copy()
        copies = {j: z[self.layout[f"copy:{j}"]].reshape(N + 1, self.net.subsystems[j].n).copy()
                  for j in self.nbrs}
        u = z[self.layout["u"]].reshape(N, self.m).copy()
        return AgentBundle(x, copies, u)


def build_local_qp(net: PwaNetwork, i: int, s_i, lam, z_tilde, rho: float, x_i,
                   terminal_on: bool = False) -> QpSpec:
    """Local ADMM subproblem of agent ``i`` as a :class:`QpSpec`.

    Decision vector ``(x~_i, u_i)`` with layout blocks ``x``, ``copy:<j>`` (in
    neighbor order) and ``u``. Objective is ``F_i + lam'x~ + rho/2 |x~ - z~|^2``.
    """
    lp = LocalProblem(net, i, x_i, terminal_on)
    lp.set_sequence(s_i)
    return lp.spec(None if lam is None else np.asarray(lam, dtype=float),
                   None if z_tilde is None else np.asarray(z_tilde, dtype=float), rho)


@dataclass
class AdmmState:
    z: list[np.ndarray]                 # averaged owner trajectories, shape (N+1, n_i)
    lam: list[np.ndarray]               # multipliers on x~_i
    rho: float
    tau: int = 0
    s: list[tuple[int, ...]] = field(default_factory=list)
    switch_log: list[tuple[int, int, tuple, tuple]] = field(default_factory=list)
    messages: int = 0

    def z_tilde(self, net: PwaNetwork, i: int) -> np.ndarray:
        return np.concatenate([self.z[i].ravel()] + [self.z[j].ravel() for j in net.nb(i)])


def initial_state(net: PwaNetwork, rho: float, seqs) -> AdmmState:
    z = [np.zeros((net.N + 1, s.n)) for s in net.subsystems]
    lam = []
    for i in range(net.M):
        nt = (net.N + 1) * (net.subsystems[i].n + sum(net.subsystems[j].n for j in net.nb(i)))
        lam.append(np.zeros(nt))
    return AdmmState(z, lam, rho, 0, [tuple(s) for s in seqs])


def residual(net: PwaNetwork, bundles) -> float:
    """Summed Euclidean disagreement between copies and owner trajectories."""
    r = 0.0
    for i in range(net.M):
        for j in net.nb(i):
            r += float(np.linalg.norm((bundles[i].copies[j] - bundles[j].x).ravel()))
    return r


def average(net: PwaNetwork, bundles) -> list[np.ndarray]:
    """``z_i`` as the mean of the owner trajectory and all copies of it (fixed order)."""
    z = []
    for i in range(net.M):
        acc = bundles[i].x.copy()
        holders = [j for j in range(net.M) if i in net.nb(j)]
        for j in holders:
            acc = acc + bundles[j].copies[i]
        z.append(acc / (len(holders) + 1))
    return z


def admm_round(net: PwaNetwork, problems: list[LocalProblem], state: AdmmState,
               settings: SolverSettings | None = None):
    """One synchronous round: local QPs, exchange, averaging, multiplier update.

    Returns ``(bundles, state, residual)``; ``state`` is updated in place.
    """
    settings = settings or default_settings(LOCAL_BACKEND)
    bundles = []
    for i, lp in enumerate(problems):
        # an agent nobody copies has no consensus constraint, hence no penalty
        rho_i = state.rho if net.nb(i) else 0.0
        sol = solve_qp(lp.spec(state.lam[i], state.z_tilde(net, i), rho_i), settings)
        if sol.status is not QpStatus.OPTIMAL:
            raise SwitchingInfeasibleError(i, lp.seq, sol.status, state.tau)
        bundles.append(lp.unpack(sol.z))
    state.messages += len(net.edges())
    state.z = average(net, bundles)
    for i in range(net.M):
        state.lam[i] = state.lam[i] + state.rho * (
            bundles[i].x_tilde(net.nb(i)) - state.z_tilde(net, i))
    state.tau += 1
    return bundles, state, residual(net, bundles)


@dataclass
class AdmmResult:
    bundles: list[AgentBundle]
    residual: float
    switch_log: list[tuple[int, int, tuple, tuple]]
    iterations: int
    sequences: list[tuple[int, ...]]
    F: list[float]
    messages: int
    residual_history: list[float]
    trace: list[dict] = field(default_factory=list)


def sw_admm(net: PwaNetwork, x, guesses, initial_copies, opts: AdmmOptions | None = None,
            settings: SolverSettings | None = None, record_trace: bool = False) -> AdmmResult:
    """Switching ADMM.

    Parameters
    ----------
    net : PwaNetwork
    x : sequence of arrays
        Measured states.
    guesses : sequence of arrays
        Input guesses, shape ``(N, m_i)`` each; used only to generate the
        initial switching sequences.
    initial_copies : sequence of dict
        Neighbor trajectory copies per agent, typically from ``d_rout``.
    opts : AdmmOptions

    Returns
    -------
    AdmmResult
    """
    opts = opts or AdmmOptions()
    settings = settings or default_settings(LOCAL_BACKEND)
    M = net.M
    problems = [LocalProblem(net, i, x[i], opts.terminal_on, opts.soft_state_penalty) for i in range(M)]
    seqs = []
    for i in range(M):
        S = eval_switching(net, i, x[i], guesses[i], initial_copies[i], opts.switch_tol, opts.max_branches)
        seqs.append(S[0])
        problems[i].set_sequence(S[0])
    state = initial_state(net, opts.rho, seqs)
    bundles = None
    r = np.inf
    history = []
    trace = []
    for tau in range(opts.T_admm):
        try:
            bundles, state, r = admm_round(net, problems, state, settings)
        except SwitchingInfeasibleError as exc:
            cls = AssumptionViolationError if tau >= opts.T_cut else SwitchingInfeasibleError
            raise cls(exc.agent, exc.seq, exc.status, tau) from None
        history.append(r)
        switched = [False] * M
        if tau < opts.T_cut:
            for i in range(M):
                S = eval_switching(net, i, x[i], bundles[i].u, bundles[i].copies,
                                   opts.switch_tol, opts.max_branches)
                others = [s for s in S if s != state.s[i]]
                if others:
                    state.switch_log.append((tau, i, state.s[i], others[0]))
                    state.s[i] = others[0]
                    problems[i].set_sequence(others[0])
                    switched[i] = True
        if record_trace:
            for i in range(M):
                trace.append({
                    "tau": tau, "agent": i, "residual": r,
                    "objective": local_cost(net, i, bundles[i].x, bundles[i].u, bundles[i].copies),
                    "switched": switched[i], "s": "-".join(map(str, state.s[i])),
                })
        if opts.early_stop and r <= opts.target_residual and not any(switched):
            break
    if bundles is None:
        # zero iterations requested: report the guess as is
        raise ValueError("T_admm must be at least 1")
    F = [local_cost(net, i, b.x, b.u, b.copies) for i, b in enumerate(bundles)]
    return AdmmResult(bundles, r, state.switch_log, state.tau, list(state.s), F,
                      state.messages, history, trace)


TRACE_COLUMNS = ["tau", "agent", "residual", "objective", "switched", "s"]


def write_trace_csv(path, rows, extra: dict | None = None) -> None:
    """Write iteration trace rows; ``extra`` columns (e.g. time step) go first."""
    extra = extra or {}
    cols = list(extra) + TRACE_COLUMNS
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in rows:
            vals = [extra[c] for c in extra] + [row[c] for c in TRACE_COLUMNS]
            w.writerow([_fmt(v) for v in vals])


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return v
