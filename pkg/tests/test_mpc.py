import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from builders import scalar_pair, stable_scalar_pair, zeros_guess
from closed_loop import (
    optimization_steps, rollout_bound_violations, terminal_exits, value_decrease_violations,
)
from pwadmpc.admm import AdmmOptions
from pwadmpc.polytope import DEFAULT_TOL
from pwadmpc.model import contains, network_from_dict, network_to_dict
from pwadmpc.mpc import (
    ControllerConfig, ControllerMemory, GuardError, dmpc_step, plant_step, shift_guess, simulate,
    stable_dmpc_step,
)
from pwadmpc.oracle import global_optimum, solve_sequence_problem

PAIR = ((0.8, 1.1), (0.9, 0.6))
# tight consensus so the closed-loop inequalities are checked without ADMM slack
TIGHT = AdmmOptions(rho=1.0, T_admm=200, T_cut=20, target_residual=1e-8)


def col(*v):
    return np.array(v, dtype=float).reshape(-1, 1)


# ---------------------------------------------------------------- examples

def test_shift_plain_repeats_last_input():
    net = scalar_pair(PAIR, N=3)
    out = shift_guess(net, [col(1, 2, 3), col(-1, -2, -3)])
    assert np.array_equal(out[0], col(2, 3, 3)) and np.array_equal(out[1], col(-2, -3, -3))


def test_shift_stable_appends_terminal_control():
    net = stable_scalar_pair(PAIR, N=3)
    prev_x = [col(1.0, 0.6, 0.3, 0.4), col(-1.0, -0.5, -0.2, -0.1)]
    out = shift_guess(net, [col(1, 2, 3), col(-1, -2, -3)], prev_x, stable=True)
    # x_N = 0.4 lies in the x >= 0 mode, -0.1 in the x <= 0 mode
    assert np.allclose(out[0], col(2, 3, -PAIR[0][1] * 0.4))
    assert np.allclose(out[1], col(-2, -3, -PAIR[1][0] * -0.1))


def test_shift_stable_at_origin_is_zero():
    net = stable_scalar_pair(PAIR, N=3)
    out = shift_guess(net, zeros_guess(net), [np.zeros((4, 1))] * 2, stable=True)
    assert all(not o.any() for o in out)


def test_shift_stable_rejects_final_state_without_a_gain():
    d = network_to_dict(stable_scalar_pair(PAIR, N=3))
    del d["subsystems"][0]["terminal"]["gains"]["1"]
    net = network_from_dict(d)
    with pytest.raises(GuardError):
        shift_guess(net, zeros_guess(net), [col(1, 1, 1, 0.3), np.zeros((4, 1))], stable=True)
    with pytest.raises(GuardError):
        shift_guess(net, zeros_guess(net), stable=True)
    with pytest.raises(GuardError):
        shift_guess(scalar_pair(PAIR), zeros_guess(scalar_pair(PAIR)), [np.zeros((3, 1))] * 2, stable=True)


def test_terminal_branch_applies_local_gains():
    net = stable_scalar_pair(PAIR)
    x = [np.array([0.3]), np.array([-0.2])]
    u0, rec, mem = stable_dmpc_step(net, x, ControllerMemory(), ControllerConfig(mode="stable"))
    assert rec.in_terminal and rec.messages == 0 and mem.entered_terminal
    assert u0[0][0] == pytest.approx(-PAIR[0][1] * 0.3) and u0[1][0] == pytest.approx(-PAIR[1][0] * -0.2)


def test_guard_replaces_a_worse_admm_result_by_the_rollout():
    net = stable_scalar_pair(PAIR)
    x = [np.array([3.0]), np.array([-2.5])]
    best = global_optimum(net, x, terminal_on=True)
    # one heavily penalized round from the optimal guess cannot improve on it
    cfg = ControllerConfig(mode="stable", admm=AdmmOptions(rho=100.0, T_admm=1, T_cut=0))
    u0, rec, _ = stable_dmpc_step(net, x, ControllerMemory(first_guess=best.best_u), cfg)
    assert rec.guard_triggered
    assert rec.F == rec.F_dr
    for i in range(2):
        assert np.array_equal(u0[i], best.best_u[i][0])
    assert sum(rec.F_dr) == pytest.approx(best.best_value, rel=1e-6)


def test_stable_mode_needs_terminal_ingredients():
    net = scalar_pair(PAIR)
    with pytest.raises(GuardError):
        stable_dmpc_step(net, [np.ones(1), np.ones(1)], ControllerMemory(), ControllerConfig(mode="stable"))


def test_weakly_infeasible_first_guess_is_rejected():
    net = stable_scalar_pair(((2.0, 2.0), (2.0, 2.0)))
    # |2 x| - 2 > 5 after one step: the state constraint cannot be met
    with pytest.raises(GuardError, match="weakly feasible"):
        stable_dmpc_step(net, [np.array([4.0]), np.array([4.0])], ControllerMemory(),
                         ControllerConfig(mode="stable"))


def test_config_validation():
    with pytest.raises(ValueError):
        ControllerConfig(mode="robust")
    with pytest.raises(ValueError):
        ControllerConfig(multi_start=("shift", "random"))
    with pytest.raises(ValueError):
        ControllerConfig(multi_start=())


def single_region(N=4):
    return network_from_dict({
        "N": N, "neighbors": {"0": []},
        "subsystems": [{
            "n": 1, "m": 1,
            "modes": [{"A": [[1.2]], "B": [[0.5]], "c": [0.1], "region": {"lo": [-10], "hi": [10]}}],
            "X": {"lo": [-10], "hi": [10]}, "U": {"lo": [-1], "hi": [1]}, "Q": [[2.0]], "R": [[0.5]],
        }],
    })


def test_convex_single_agent_matches_direct_qp():
    net = single_region()
    x = [np.array([3.0])]
    u0, bundles, rec = dmpc_step(net, x, [zeros_guess(net)], ControllerConfig())
    ref = solve_sequence_problem(net, x, [(0,) * (net.N + 1)])
    assert ref.ok
    assert u0[0] == pytest.approx(ref.u[0][0], abs=1e-6)
    assert sum(rec.F) == pytest.approx(ref.value, rel=1e-7)


def test_duplicate_starts_change_nothing():
    net = scalar_pair(PAIR, N=3)
    x = [np.array([1.5]), np.array([-0.7])]
    g = [col(0.2, 0.1, 0.0), col(-0.3, 0.0, 0.1)]
    one = dmpc_step(net, x, [g], ControllerConfig())[2]
    two = dmpc_step(net, x, [g, g], ControllerConfig())[2]
    assert all(np.array_equal(a, b) for a, b in zip(one.u, two.u))
    assert one.F == two.F


def test_origin_costs_nothing():
    net = stable_scalar_pair(PAIR)
    sim = simulate(net, [np.zeros(1), np.zeros(1)], ControllerConfig(mode="stable"), 5)
    assert sim.J == 0.0 and all(r.in_terminal for r in sim.records)
    assert all(not xi.any() for xi in sim.x)


def test_plain_simulation_records_messages():
    net = scalar_pair(PAIR, N=2)
    sim = simulate(net, [np.array([1.0]), np.array([-1.0])], ControllerConfig(), 3)
    assert len(sim.records) == 3 and all(r.messages > 0 for r in sim.records)
    assert sim.J == pytest.approx(sum(r.stage_cost for r in sim.records))


# ---------------------------------------------------------------- properties

gain = st.floats(-1.0, 1.0, allow_nan=False, allow_infinity=False)
start = st.floats(-4.5, 4.5, allow_nan=False, allow_infinity=False)


@st.composite
def stable_case(draw):
    a = ((draw(gain), draw(gain)), (draw(gain), draw(gain)))
    return stable_scalar_pair(a), [np.array([draw(start)]), np.array([draw(start)])]


@given(stable_case())
def test_closed_loop_guarantees(case):
    net, x0 = case
    try:
        sim = simulate(net, x0, ControllerConfig(mode="stable", admm=TIGHT), 8)
    except GuardError as exc:
        assume("weakly feasible" not in str(exc))
        raise
    # recursive feasibility: every visited state and applied input is admissible
    for r in sim.records:
        for i, sub in enumerate(net.subsystems):
            assert contains(sub.X, r.x[i]) and contains(sub.U, r.u[i])
    assert rollout_bound_violations(sim) == []
    assert value_decrease_violations(net, sim) == []
    assert terminal_exits(sim) == []
    # ADMM stops early only once the residual meets its target
    for r in optimization_steps(sim):
        assert r.residual <= TIGHT.target_residual or r.guard_triggered or r.iterations == TIGHT.T_admm


def gain_at(a, v):
    # x <= 0 is mode 0, and the lowest index wins within the boundary tolerance
    return a[0] if v <= DEFAULT_TOL else a[1]


terminal_point = st.floats(-0.5, 0.5, allow_nan=False, allow_infinity=False)


@given(st.tuples(gain, gain), st.tuples(gain, gain), terminal_point, terminal_point)
def test_terminal_branch_applies_gains_and_stays_inside(a0, a1, v0, v1):
    net = stable_scalar_pair((a0, a1))
    x = [np.array([v0]), np.array([v1])]
    u0, rec, _ = stable_dmpc_step(net, x, ControllerMemory(), ControllerConfig(mode="stable"))
    assert rec.in_terminal and rec.messages == 0
    for i, (v, a) in enumerate(((v0, a0), (v1, a1))):
        assert u0[i][0] == pytest.approx(-gain_at(a, v) * v, abs=1e-15)
    x1 = plant_step(net, x, u0)
    assert all(contains(s.terminal.X_T, x1[i]) for i, s in enumerate(net.subsystems))


small_input = st.floats(-1.0, 1.0, allow_nan=False, allow_infinity=False)


@given(st.tuples(gain, gain), st.tuples(gain, gain), st.lists(small_input, min_size=4, max_size=4),
       terminal_point, terminal_point)
def test_stable_shift_tail(a0, a1, us, xa, xb):
    net = stable_scalar_pair((a0, a1), N=2)
    prev_u = [col(*us[:2]), col(*us[2:])]
    prev_x = [col(9.0, 9.0, xa), col(9.0, 9.0, xb)]
    out = shift_guess(net, prev_u, prev_x, stable=True)
    for i, (xN, a) in enumerate(((xa, a0), (xb, a1))):
        assert out[i][0, 0] == prev_u[i][1, 0]
        assert out[i][1, 0] == pytest.approx(-gain_at(a, xN) * xN, abs=1e-15)


@given(st.tuples(gain, gain), st.tuples(gain, gain), st.lists(small_input, min_size=8, max_size=8),
       st.floats(-3, 3), st.floats(-3, 3))
def test_multi_start_keeps_the_cheapest_run(a0, a1, us, x0, x1):
    net = scalar_pair((a0, a1), N=2, x_bound=10.0)
    x = [np.array([x0]), np.array([x1])]
    starts = [[col(*us[0:2]), col(*us[2:4])], [col(*us[4:6]), col(*us[6:8])]]
    cfg = ControllerConfig(admm=AdmmOptions(rho=1.0, T_admm=30, T_cut=10))
    singles = []
    for g in starts:
        try:
            singles.append(dmpc_step(net, x, [g], cfg)[2])
        except Exception:
            singles.append(None)
    assume(any(s is not None for s in singles))
    rec = dmpc_step(net, x, starts, cfg)[2]
    ok = [s for s in singles if s is not None]
    good = [s for s in ok if s.residual <= cfg.admm.target_residual] or ok
    assert sum(rec.F) == min(sum(s.F) for s in good)
