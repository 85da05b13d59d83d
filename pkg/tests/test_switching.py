import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from builders import scalar_pair, single_agent_quadrants, zeros_guess
from pwadmpc.model import OutOfPartitionError, global_value, network_from_dict
from pwadmpc.switching import CapacityError, d_rout, eval_switching, generates

FROZEN = json.loads((Path(__file__).parent / "data" / "frozen.json").read_text())
I2 = ((1, 0), (0, 1))


def rollout_states(net, i, x0, u, seq, copies):
    """Re-simulate agent ``i`` under a fixed sequence."""
    from pwadmpc.model import step

    xs = [np.asarray(x0, dtype=float)]
    for k in range(net.N):
        nb = {j: copies[j][k] for j in net.nb(i)}
        xs.append(step(net, i, xs[-1], u[k], nb, seq[k]))
    return xs


# ---------------------------------------------------------------- examples

def test_interior_point_single_sequence():
    net = single_agent_quadrants(I2, N=2)
    assert eval_switching(net, 0, [1.0, 1.0], np.zeros((2, 1)), {}) == [(0, 0, 0)]


def test_boundary_point_branches_every_step():
    net = single_agent_quadrants(I2, N=1)
    got = eval_switching(net, 0, [0.0, 1.0], np.zeros((1, 1)), {})
    assert sorted(got) == [(0, 0), (0, 1), (1, 0), (1, 1)]
    # branch-creation order: the lowest region keeps its slot
    assert got[0] == (0, 0)


def test_sign_flip_lands_in_opposite_quadrant():
    net = single_agent_quadrants(((-1, 0), (0, -1)), N=1)
    assert eval_switching(net, 0, [1.0, 1.0], np.zeros((1, 1)), {}) == [(0, 2)]


def test_out_of_partition_is_reported():
    cfg = {"N": 1, "neighbors": {"0": []}, "subsystems": [{
        "n": 1, "m": 1, "modes": [{"A": [[2.0]], "B": [[0.0]], "c": [0.0], "region": {"lo": [-1], "hi": [1]}}],
        "X": {"lo": [-1], "hi": [1]}, "U": {"lo": [-1], "hi": [1]}, "Q": [[1]], "R": [[1]]}]}
    bounded = network_from_dict(cfg)
    with pytest.raises(OutOfPartitionError):
        eval_switching(bounded, 0, [0.9], np.zeros((1, 1)), {})
    net = single_agent_quadrants(I2, N=1)
    assert eval_switching(net, 0, [5.0, -5.0], np.zeros((1, 1)), {}) == [(3, 3)]


def test_branch_cap():
    net = single_agent_quadrants(I2, N=3)
    # origin lies in all four closures: 4^4 sequences
    assert len(eval_switching(net, 0, [0.0, 0.0], np.zeros((3, 1)), {})) == 256
    with pytest.raises(CapacityError):
        eval_switching(net, 0, [0.0, 0.0], np.zeros((3, 1)), {}, max_branches=255)


def test_rollout_at_origin_is_zero(weak):
    out = d_rout(weak, [np.zeros(2)] * 3, zeros_guess(weak))
    assert all(r.F_dr == 0.0 and not r.bundle.x.any() for r in out)


def test_rollout_decoupled_hand_sum():
    cfg = {"N": 3, "neighbors": {"0": []}, "subsystems": [{
        "n": 1, "m": 1, "modes": [{"A": [[0.0]], "B": [[0.0]], "c": [0.0], "region": {"lo": [-9], "hi": [9]}}],
        "X": {"lo": [-9], "hi": [9]}, "U": {"lo": [-1], "hi": [1]}, "Q": [[3.0]], "R": [[1]],
        "terminal": {"X_T": {"lo": [-1], "hi": [1]}, "Phi": [[7.0]], "gains": {"0": [[0.0]]}}}]}
    net = network_from_dict(cfg)
    (r,) = d_rout(net, [[2.0]], zeros_guess(net))
    assert r.F_dr == pytest.approx(3.0 * 4.0)


def test_rollout_weak_zero_guess_matches_reference(weak):
    x0 = [np.array(v, dtype=float) for v in [[-11, -18], [2, -19], [15, 19]]]
    out = d_rout(weak, x0, zeros_guess(weak))
    ref = FROZEN["weak_rollout_zero_guess"]
    for i, r in enumerate(out):
        assert r.F_dr == pytest.approx(ref["F_dr"][i], rel=1e-12)
        assert np.allclose(r.bundle.x, ref["x"][i], rtol=1e-12, atol=1e-12)


def test_rollout_error_names_agent_and_step():
    from pwadmpc.model import network_to_dict

    # half-line regions are unbounded, so cap agent 0's regions at |x| <= 3
    d = network_to_dict(scalar_pair(((2.0, 2.0), (0.5, 0.5)), coupling=(0.0, 0.0)))
    for md in d["subsystems"][0]["modes"]:
        md["region"] = {"H": md["region"]["H"] + [[1.0], [-1.0]], "h": md["region"]["h"] + [3.0, 3.0]}
    bounded = network_from_dict(d)
    with pytest.raises(OutOfPartitionError) as info:
        d_rout(bounded, [[2.0], [0.0]], zeros_guess(bounded))
    assert info.value.subsystem == 0 and info.value.step == 1


# ---------------------------------------------------------------- properties

coord = st.floats(-3, 3, allow_nan=False, allow_infinity=False)
gain = st.floats(-1.5, 1.5, allow_nan=False, allow_infinity=False)
# values on a coarse lattice make boundary hits common
lattice = st.integers(-4, 4).map(lambda v: 0.5 * v)


@st.composite
def pair_case(draw):
    a = ((draw(gain), draw(gain)), (draw(gain), draw(gain)))
    cpl = (draw(st.floats(-0.3, 0.3)), draw(st.floats(-0.3, 0.3)))
    x0 = [np.array([draw(st.one_of(coord, lattice))]) for _ in range(2)]
    u = [np.array([[draw(st.one_of(coord, lattice))] for _ in range(3)]) for _ in range(2)]
    return scalar_pair(a, coupling=cpl, N=3, x_bound=50.0), x0, u


@given(pair_case())
def test_returned_sequences_are_generated(case):
    net, x0, u = case
    dr = d_rout(net, x0, u)
    for i in range(2):
        seqs = eval_switching(net, i, x0[i], u[i], dr[i].bundle.copies)
        assert len(seqs) == len(set(seqs)) >= 1
        for s in seqs:
            xs = rollout_states(net, i, x0[i], u[i], s, dr[i].bundle.copies)
            assert generates(net, i, xs, s)


@given(pair_case())
def test_interior_rollout_gives_one_sequence(case):
    net, x0, u = case
    dr = d_rout(net, x0, u)
    for i in range(2):
        assume(np.all(np.abs(dr[i].bundle.x) > 1e-6))
    for i in range(2):
        assert len(eval_switching(net, i, x0[i], u[i], dr[i].bundle.copies)) == 1


@given(pair_case())
def test_copies_equal_owner_trajectories(case):
    net, x0, u = case
    dr = d_rout(net, x0, u)
    for i in range(2):
        for j, c in dr[i].bundle.copies.items():
            assert np.array_equal(c, dr[j].bundle.x)
        assert np.array_equal(dr[i].bundle.x[0], x0[i])


@given(pair_case())
def test_rollout_cost_equals_global_value(case):
    net, x0, u = case
    dr = d_rout(net, x0, u)
    total = sum(r.F_dr for r in dr)
    V = global_value(net, x0, u)
    if np.isfinite(V):
        assert total == pytest.approx(V, rel=1e-9, abs=1e-12)
