"""Terminal sets and terminal costs for the stabilizing controller.

Near the origin every agent applies ``u_i = K_i^l x_i`` in the active
origin region ``l``. The terminal sets must be robustly invariant under
these gains for any neighbor state inside the neighbors' terminal sets, and
the block-diagonal terminal cost must decrease along the closed loop by at
least the stage cost for every combination of active regions.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .model import PwaNetwork, stage_cost, step
from .polytope import (
    DEFAULT_TOL, EmptySetError, HPolytope, chebyshev_center, contains, intersect, is_empty, linear_preimage,
    remove_redundant, sample_points, set_equal, support,
)
from .switching import CapacityError

__all__ = [
    "EmptyTerminalSetError",
    "TerminalNonConvergenceError",
    "UnsupportedCapabilityError",
    "InvarianceReport",
    "LyapunovReport",
    "SynthesisResult",
    "origin_regions",
    "terminal_set_step",
    "compute_terminal_sets",
    "verify_invariance",
    "verify_invariance_exact",
    "verify_terminal_cost",
    "synthesize_terminal_cost",
    "terminal_decrease",
    "DEFAULT_EIG_TOL",
    "MODE_COMBINATION_CAP",
]

log = logging.getLogger(__name__)

DEFAULT_EIG_TOL = 1e-9
MODE_COMBINATION_CAP = 4 ** 4
COLLAPSE_RATIO = 1e-9


class EmptyTerminalSetError(RuntimeError):
    def __init__(self, subsystem: int, iteration: int):
        self.subsystem, self.iteration = subsystem, iteration
        super().__init__(f"terminal set of subsystem {subsystem} became empty at iteration {iteration}")


class TerminalNonConvergenceError(RuntimeError):
    pass


class UnsupportedCapabilityError(RuntimeError):
    pass


def origin_regions(net: PwaNetwork, i: int, gains: dict | None = None, tol: float = DEFAULT_TOL) -> list[int]:
    """Regions of agent ``i`` whose closure holds the origin (and that have a gain)."""
    sub = net.subsystems[i]
    ls = sub.origin_modes(tol)
    if gains is not None:
        missing = [l for l in ls if l not in gains]
        if missing:
            raise ValueError(f"subsystem {i}: no terminal gain for origin regions {missing}")
    return ls


def _gains(net, gains):
    if gains is not None:
        return [{int(l): np.atleast_2d(np.asarray(K, dtype=float)) for l, K in g.items()} for g in gains]
    out = []
    for i, s in enumerate(net.subsystems):
        if s.terminal is None:
            raise ValueError(f"subsystem {i}: no gains given and none in the network")
        out.append(s.terminal.gains)
    return out


def _closed_loop(sub, l, K):
    md = sub.modes[l]
    return md.A + md.B @ K


def _coupling_support(sets, A_ij: dict, a: np.ndarray) -> float:
    # support of the Minkowski sum of the images A_ij X_j along a
    return sum(support(sets[j], Aij.T @ a) for j, Aij in A_ij.items() if np.any(Aij))


def _one_step_set(net, i, l, K, sets):
    """``{x | A_cl x + c + w in X_i for all w in W}`` with ``W`` the summed neighbor images."""
    sub = net.subsystems[i]
    md = sub.modes[l]
    X = sets[i]
    sigma = np.array([_coupling_support(sets, md.A_ij, row) for row in X.H])
    eroded = HPolytope(X.H.copy(), X.h - sigma - X.H @ md.c)
    return linear_preimage(eroded, _closed_loop(sub, l, K))


def _scaled_tol(P, tol):
    r = chebyshev_center(P)[1]
    return tol * r if r > 0 else tol


def terminal_set_step(net: PwaNetwork, sets, gains=None) -> list[HPolytope]:
    """One erosion pass: each set intersected with its one-step sets over the origin regions."""
    gains = _gains(net, gains)
    out = []
    for i in range(net.M):
        cur = sets[i]
        for l in origin_regions(net, i, gains[i]):
            cur = intersect(cur, _one_step_set(net, i, l, gains[i][l], sets))
        out.append(cur if is_empty(cur) else remove_redundant(cur))
    return out


def compute_terminal_sets(net: PwaNetwork, X0, gains=None, max_iter: int = 100,
                          tol: float = 1e-6, return_iterations: bool = False):
    """Largest robustly invariant subsets of the seed sets ``X0``.

    Iterates ``X_i <- X_i  cap  (cap over origin regions l of the one-step set
    of X_i under gain K_i^l with disturbance sum_j A_ij^l X_j)`` until no set
    changes (equality up to ``tol`` times the set's inradius).

    Raises
    ------
    EmptyTerminalSetError
        Some iterate is empty.
    TerminalNonConvergenceError
        No fixed point within ``max_iter`` iterations.
    """
    gains = _gains(net, gains)
    sets = [remove_redundant(P) for P in X0]
    for i, P in enumerate(sets):
        if is_empty(P):
            raise EmptyTerminalSetError(i, 0)
    r0 = [chebyshev_center(P)[1] for P in sets]
    for it in range(1, max_iter + 1):
        new = terminal_set_step(net, sets, gains)
        for i, P in enumerate(new):
            if is_empty(P):
                raise EmptyTerminalSetError(i, it)
        # tolerance relative to the set size so shrinking sets never look fixed
        for i, P in enumerate(new):
            # below this the absolute polytope tolerances stop resolving the iterates
            if r0[i] > 0 and chebyshev_center(P)[1] < COLLAPSE_RATIO * r0[i]:
                raise TerminalNonConvergenceError(
                    f"terminal set of subsystem {i} collapses towards a point (iteration {it})")
        done = all(set_equal(a, b, _scaled_tol(b, tol)) for a, b in zip(new, sets))
        sets = new
        if done:
            log.debug("terminal sets converged after %d iterations", it)
            return (sets, it) if return_iterations else sets
    raise TerminalNonConvergenceError(f"no fixed point after {max_iter} iterations")


@dataclass
class InvarianceReport:
    n_checked: int = 0
    violations: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {"ok": self.ok, "n_checked": self.n_checked, "violations": self.violations[:50],
                "n_violations": len(self.violations)}


def _active_origin_region(sub, x, ls, tol):
    for l in ls:
        if contains(sub.modes[l].region, x, tol):
            return l
    return None


def verify_invariance(net: PwaNetwork, sets, gains=None, samples: int = 10_000, seed: int = 0,
                      boundary_fraction: float = 0.5, tol: float = 1e-8) -> InvarianceReport:
    """Sampling check of robust invariance and input admissibility.

    Every sample draws one point per agent from its set (half of them on the
    boundary by default) and checks, for each agent, that the gain input is
    admissible and the successor stays in the agent's set.
    """
    gains = _gains(net, gains)
    rng = np.random.default_rng(seed)
    report = InvarianceReport()
    pts = [sample_points(P, samples, rng, boundary_fraction) for P in sets]
    ls = [origin_regions(net, i, gains[i]) for i in range(net.M)]
    for k in range(samples):
        xs = [p[k % len(p)] for p in pts]
        for i, sub in enumerate(net.subsystems):
            report.n_checked += 1
            l = _active_origin_region(sub, xs[i], ls[i], tol)
            if l is None:
                report.violations.append({"agent": i, "x": xs[i].tolist(), "kind": "no_origin_region"})
                continue
            u = gains[i][l] @ xs[i]
            if not contains(sub.U, u, tol):
                report.violations.append({"agent": i, "x": xs[i].tolist(), "kind": "input", "region": l})
            xn = step(net, i, xs[i], u, {j: xs[j] for j in net.nb(i)}, l)
            if not contains(sets[i], xn, tol):
                report.violations.append({"agent": i, "x": xs[i].tolist(), "kind": "successor", "region": l})
    return report


def verify_invariance_exact(net: PwaNetwork, sets, gains=None, tol: float = 1e-8) -> InvarianceReport:
    """Facet-wise check of the same property with one LP per (agent, region, facet).

    Neighbor states enter additively and range over independent sets, so the
    worst case splits into a sum of support functions and the check is exact.
    """
    gains = _gains(net, gains)
    report = InvarianceReport()
    for i, sub in enumerate(net.subsystems):
        for l in origin_regions(net, i, gains[i]):
            dom = intersect(sets[i], sub.modes[l].region)
            if is_empty(dom):
                continue
            K = gains[i][l]
            Acl = _closed_loop(sub, l, K)
            md = sub.modes[l]
            for f, (a, b) in enumerate(zip(sets[i].H, sets[i].h)):
                report.n_checked += 1
                worst = support(dom, Acl.T @ a) + float(a @ md.c) + _coupling_support(sets, md.A_ij, a)
                if worst > b + tol * max(1.0, abs(b)):
                    report.violations.append({"agent": i, "region": l, "facet": f, "kind": "successor",
                                              "excess": worst - b})
            for f, (a, b) in enumerate(zip(sub.U.H, sub.U.h)):
                report.n_checked += 1
                worst = support(dom, K.T @ a)
                if worst > b + tol * max(1.0, abs(b)):
                    report.violations.append({"agent": i, "region": l, "facet": f, "kind": "input",
                                              "excess": worst - b})
    return report


@dataclass
class LyapunovReport:
    max_eig: dict[tuple[int, ...], float]
    eig_tol: float

    @property
    def worst(self) -> float:
        return max(self.max_eig.values()) if self.max_eig else -np.inf

    @property
    def ok(self) -> bool:
        return self.worst < -self.eig_tol

    def to_dict(self) -> dict:
        return {"ok": self.ok, "worst": self.worst, "eig_tol": self.eig_tol,
                "max_eig": {"-".join(map(str, k)): v for k, v in sorted(self.max_eig.items())}}


def _blocks(net):
    off = np.cumsum([0] + [s.n for s in net.subsystems])
    uoff = np.cumsum([0] + [s.m for s in net.subsystems])
    return off, uoff


def _global_weights(net):
    off, uoff = _blocks(net)
    n, m = off[-1], uoff[-1]
    Q = np.zeros((n, n))
    R = np.zeros((m, m))
    for i, s in enumerate(net.subsystems):
        Q[off[i]:off[i + 1], off[i]:off[i + 1]] += s.Q
        R[uoff[i]:uoff[i + 1], uoff[i]:uoff[i + 1]] = s.R
        # agent i weighs neighbor j's state: that lands on j's diagonal block
        for j, Qij in s.Q_ij.items():
            Q[off[j]:off[j + 1], off[j]:off[j + 1]] += Qij
    return Q, R


def _combination_matrices(net, combo, gains):
    off, uoff = _blocks(net)
    n, m = off[-1], uoff[-1]
    Acl = np.zeros((n, n))
    K = np.zeros((m, n))
    for i, (s, l) in enumerate(zip(net.subsystems, combo)):
        md = s.modes[l]
        Ki = gains[i][l]
        Acl[off[i]:off[i + 1], off[i]:off[i + 1]] = md.A + md.B @ Ki
        for j, Aij in md.A_ij.items():
            Acl[off[i]:off[i + 1], off[j]:off[j + 1]] += Aij
        K[uoff[i]:uoff[i + 1], off[i]:off[i + 1]] = Ki
    return Acl, K


def _combinations(net, gains, cap):
    ls = [origin_regions(net, i, gains[i]) for i in range(net.M)]
    total = int(np.prod([len(x) for x in ls]))
    if total > cap:
        raise CapacityError(f"{total} region combinations exceed the cap {cap}")
    return list(itertools.product(*ls))


def _block_diag(mats):
    n = sum(M.shape[0] for M in mats)
    out = np.zeros((n, n))
    o = 0
    for M in mats:
        k = M.shape[0]
        out[o:o + k, o:o + k] = M
        o += k
    return out


def verify_terminal_cost(net: PwaNetwork, Phis=None, gains=None, eig_tol: float = DEFAULT_EIG_TOL,
                         cap: int = MODE_COMBINATION_CAP) -> LyapunovReport:
    """Largest eigenvalue of ``A_cl' Phi A_cl - Phi + Q + K' R K`` per region combination.

    Passes iff every eigenvalue is below ``-eig_tol``.
    """
    gains = _gains(net, gains)
    if Phis is None:
        Phis = [s.terminal.Phi for s in net.subsystems]
    Phi = _block_diag([np.atleast_2d(np.asarray(P, dtype=float)) for P in Phis])
    Q, R = _global_weights(net)
    out = {}
    for combo in _combinations(net, gains, cap):
        Acl, K = _combination_matrices(net, combo, gains)
        S = Acl.T @ Phi @ Acl - Phi + Q + K.T @ R @ K
        out[tuple(combo)] = float(np.linalg.eigvalsh(0.5 * (S + S.T))[-1])
    return LyapunovReport(out, eig_tol)


@dataclass
class SynthesisResult:
    ok: bool
    Phis: list[np.ndarray] | None
    status: str


def synthesize_terminal_cost(net: PwaNetwork, gains=None, margin: float = 1e-4,
                             cap: int = MODE_COMBINATION_CAP) -> SynthesisResult:
    """Block-diagonal terminal cost meeting the decrease condition with ``margin``.

    Minimizes the trace of ``Phi`` subject to one matrix inequality per region
    combination. Needs cvxpy with an SDP-capable solver.
    """
    try:
        import cvxpy as cp
    except ImportError as exc:
        raise UnsupportedCapabilityError("terminal cost synthesis needs cvxpy (pip install 'artifact[lmi]')") from exc
    gains = _gains(net, gains)
    combos = _combinations(net, gains, cap)
    Q, R = _global_weights(net)
    blocks = [cp.Variable((s.n, s.n), symmetric=True) for s in net.subsystems]
    Phi = cp.bmat([[blocks[i] if i == j else np.zeros((net.subsystems[i].n, net.subsystems[j].n))
                    for j in range(net.M)] for i in range(net.M)])
    n = Q.shape[0]
    cons = [B >> 0 for B in blocks]
    for combo in combos:
        Acl, K = _combination_matrices(net, combo, gains)
        S = Acl.T @ Phi @ Acl - Phi + Q + K.T @ R @ K
        cons.append(0.5 * (S + S.T) << -margin * np.eye(n))
    prob = cp.Problem(cp.Minimize(sum(cp.trace(B) for B in blocks)), cons)
    try:
        prob.solve()
    except cp.error.SolverError as exc:
        return SynthesisResult(False, None, f"solver error: {exc}")
    if prob.status not in ("optimal", "optimal_inaccurate"):
        return SynthesisResult(False, None, prob.status)
    Phis = [0.5 * (B.value + B.value.T) for B in blocks]
    return SynthesisResult(True, Phis, prob.status)


def terminal_decrease(net: PwaNetwork, x, gains=None, Phis=None, tol: float = DEFAULT_TOL) -> float:
    """``sum_i [V_f(x_i+) - V_f(x_i) + l_i]`` under the terminal gains at ``x``.

    Nonpositive on the terminal sets whenever the terminal cost passes
    ``verify_terminal_cost``.
    """
    gains = _gains(net, gains)
    if Phis is None:
        Phis = [s.terminal.Phi for s in net.subsystems]
    x = [np.asarray(v, dtype=float) for v in x]
    total = 0.0
    for i, sub in enumerate(net.subsystems):
        l = _active_origin_region(sub, x[i], origin_regions(net, i, gains[i]), tol)
        if l is None:
            raise EmptySetError(f"subsystem {i}: state lies in no origin region")
        u = gains[i][l] @ x[i]
        xn = step(net, i, x[i], u, {j: x[j] for j in net.nb(i)}, l)
        P = Phis[i]
        total += float(xn @ P @ xn - x[i] @ P @ x[i])
        total += stage_cost(sub, x[i], u, {j: x[j] for j in sub.Q_ij})
    return total
