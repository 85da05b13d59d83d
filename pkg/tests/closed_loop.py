"""Checks on recorded closed-loop runs, shared by the controller and acceptance tests."""

import math

from pwadmpc.model import global_value


def optimization_steps(sim):
    return [r for r in sim.records if not r.in_terminal]


def rollout_bound_violations(sim, tol=1e-6):
    """Steps whose adopted cost exceeds the cost of that step's guess rollout."""
    bad = []
    for r in optimization_steps(sim):
        if sum(r.F) > sum(r.F_dr) + tol * (1.0 + abs(sum(r.F_dr))):
            bad.append((r.t, sum(r.F), sum(r.F_dr)))
    return bad


def adopted_value(net, rec):
    """Cost of the adopted input sequence under the true dynamics (terminal set not enforced)."""
    return global_value(net, rec.x, rec.u_seq, terminal_set=False)


def value_decrease_violations(net, sim, tol=1e-6):
    """Consecutive optimization steps where ``V(x+, u+) - V(x, u) > -l(x, u(0)) + tol``."""
    bad = []
    recs = sim.records
    for a, b in zip(recs, recs[1:]):
        if a.in_terminal or b.in_terminal:
            continue
        Va, Vb = adopted_value(net, a), adopted_value(net, b)
        if not (math.isfinite(Va) and math.isfinite(Vb)) or Vb - Va > -a.stage_cost + tol:
            bad.append((a.t, Vb - Va, -a.stage_cost))
    return bad


def terminal_exits(sim):
    """Steps at which the state left the terminal set after having entered it."""
    seen, bad = False, []
    for r in sim.records:
        if seen and not r.in_terminal:
            bad.append(r.t)
        seen = seen or r.in_terminal
    return bad
