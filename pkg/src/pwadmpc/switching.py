"""Switching-sequence generation and the message-passing rollout."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import OutOfPartitionError, PwaNetwork, find_mode, local_cost, step
from .polytope import DEFAULT_TOL, contains

__all__ = [
    "CapacityError",
    "AgentBundle",
    "RolloutResult",
    "eval_switching",
    "d_rout",
    "generates",
]

DEFAULT_MAX_BRANCHES = 256


class CapacityError(RuntimeError):
    pass


@dataclass
class AgentBundle:
    """One agent's decision block: own trajectory, neighbor copies and inputs.

    ``x`` has shape ``(N+1, n_i)``, each ``copies[j]`` has shape ``(N+1, n_j)``
    and ``u`` has shape ``(N, m_i)``.
    """

    x: np.ndarray
    copies: dict[int, np.ndarray]
    u: np.ndarray

    def copy(self) -> "AgentBundle":
        return AgentBundle(self.x.copy(), {j: c.copy() for j, c in self.copies.items()}, self.u.copy())

    def x_tilde(self, order: list[int]) -> np.ndarray:
        return np.concatenate([self.x.ravel()] + [self.copies[j].ravel() for j in order])


@dataclass
class RolloutResult:
    bundle: AgentBundle
    F_dr: float


def eval_switching(net: PwaNetwork, i: int, x_i, u_seq, copies: dict, tol: float = DEFAULT_TOL,
                   max_branches: int = DEFAULT_MAX_BRANCHES) -> list[tuple[int, ...]]:
    """All switching sequences generated by rolling out agent ``i``'s dynamics.

    Whenever a predicted state lies in the closure of several regions the
    rollout branches, each branch continuing with the dynamics of its own
    region. Sequences come back in branch-creation order: the branch that
    follows the lowest region index keeps its place, extra branches are
    appended after all existing ones.
    """
    sub = net.subsystems[i]
    N = net.N
    u_seq = np.asarray(u_seq, dtype=float).reshape(N, sub.m)
    branches = [([0] * (N + 1), np.asarray(x_i, dtype=float).reshape(-1).copy())]
    for k in range(N + 1):
        new = []
        for b, (seq, x) in enumerate(branches):
            regions = [l for l, md in enumerate(sub.modes) if contains(md.region, x, tol)]
            if not regions:
                raise OutOfPartitionError(i, x, k)
            nb = {j: copies[j][k] for j in net.nb(i)} if k < N else None
            for r, l in enumerate(regions):
                s2 = list(seq)
                s2[k] = l
                x2 = step(net, i, x, u_seq[k], nb, l) if k < N else x
                if r == 0:
                    branches[b] = (s2, x2)
                else:
                    new.append((s2, x2))
        branches.extend(new)
        if len(branches) > max_branches:
            raise CapacityError(f"agent {i}: more than {max_branches} switching branches")
    return [tuple(s) for s, _ in branches]


def generates(net: PwaNetwork, i: int, x_traj, seq, tol: float = DEFAULT_TOL) -> bool:
    """True iff every ``x_i(k)`` lies in the closure of region ``seq[k]``."""
    sub = net.subsystems[i]
    return all(contains(sub.modes[l].region, x_traj[k], tol) for k, l in enumerate(seq))


def d_rout(net: PwaNetwork, x, guesses, tol: float = DEFAULT_TOL) -> list[RolloutResult]:
    """Synchronous-round rollout of all agents under their input guesses.

    At every step each agent records its state, exchanges it with its
    neighbors, then either accumulates its stage cost and advances (``k < N``)
    or adds its terminal cost (``k = N``).
    """
    M, N = net.M, net.N
    subs = net.subsystems
    state = [np.asarray(x[i], dtype=float).reshape(-1).copy() for i in range(M)]
    U = [np.asarray(guesses[i], dtype=float).reshape(N, subs[i].m) for i in range(M)]
    X = [np.zeros((N + 1, s.n)) for s in subs]
    C = [{j: np.zeros((N + 1, subs[j].n)) for j in net.nb(i)} for i in range(M)]
    for k in range(N + 1):
        for i in range(M):
            X[i][k] = state[i]
        # message barrier: every agent sees the same round-k states
        for i in range(M):
            for j in net.nb(i):
                C[i][j][k] = X[j][k]
        if k == N:
            break
        nxt = []
        for i in range(M):
            l = find_mode(subs[i], state[i], tol, i, k)
            nxt.append(step(net, i, state[i], U[i][k], {j: C[i][j][k] for j in net.nb(i)}, l))
        state = nxt
    out = []
    for i in range(M):
        F = local_cost(net, i, X[i], U[i], C[i])
        out.append(RolloutResult(AgentBundle(X[i], C[i], U[i].copy()), F))
    return out
