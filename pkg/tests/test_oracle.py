import itertools
import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from builders import scalar_pair
from pwadmpc.admm import AdmmOptions, sw_admm
from pwadmpc.model import global_value, load_network
from pwadmpc.oracle import (
    InfeasibleProblemError, StudyOptions, UndefinedMetricError, global_optimum, random_quadrant_network,
    randomized_study, solve_sequence_problem, suboptimality,
)
from pwadmpc.switching import CapacityError, d_rout, eval_switching

FROZEN = json.loads((Path(__file__).parent / "data" / "frozen.json").read_text())


@pytest.fixture(scope="module")
def toy(configs):
    return load_network(configs / "two-region-toy.json")


def key_to_seqs(key):
    return [tuple(int(c) for c in part) for part in key.split("-")]


def all_keys():
    per_agent = ["".join(map(str, p)) for p in itertools.product(range(2), repeat=2)]
    return ["-".join(k) for k in itertools.product(per_agent, repeat=2)]


# ---------------------------------------------------------------- examples

def test_toy_has_sixteen_global_sequences(toy):
    res = global_optimum(toy, [[2.0], [1.5]])
    assert res.n_sequences_total == 16 == len(all_keys())


@pytest.mark.parametrize("name, x0", [("toy_default_x0", [2.0, 1.5]), ("toy_boundary_x0", [0.3, -0.2])])
def test_toy_sequence_values_match_reference(toy, name, x0):
    ref = FROZEN[name]
    x = [[v] for v in x0]
    for key in all_keys():
        sol = solve_sequence_problem(toy, x, key_to_seqs(key))
        if key in ref["values"]:
            assert sol.ok and sol.value == pytest.approx(ref["values"][key], rel=1e-6, abs=1e-9), key
        else:
            assert not sol.ok, key
    for method in ("enumerate", "branch_and_bound"):
        best = global_optimum(toy, x, method)
        assert best.best_value == pytest.approx(ref["best"], rel=1e-6)
    assert global_optimum(toy, x).n_feasible == len(ref["values"])


def test_interior_state_prunes_first_regions(toy):
    res = global_optimum(toy, [[2.0], [1.5]])
    # only sequences starting in the measured regions are solved
    assert res.n_solved == 4
    assert res.best_s == [(0, 0), (0, 0)]


def test_enumeration_cap(toy):
    with pytest.raises(CapacityError):
        global_optimum(toy, [[2.0], [1.5]], cap=15)
    with pytest.raises(ValueError):
        global_optimum(toy, [[2.0], [1.5]], method="guess")


def test_infeasible_state_is_reported():
    net = scalar_pair(((3.0, 3.0), (3.0, 3.0)), N=2, x_bound=5.0, u_bound=0.1)
    for method in ("enumerate", "branch_and_bound"):
        with pytest.raises(InfeasibleProblemError):
            global_optimum(net, [[4.0], [4.0]], method)


def test_suboptimality_examples():
    assert suboptimality(1.0, 1.0) == 0.0
    assert suboptimality(2.0, 1.0) == pytest.approx(100.0)
    assert suboptimality(1.164, 1.0) == pytest.approx(16.4)
    with pytest.raises(UndefinedMetricError):
        suboptimality(1.0, 0.0)


def test_study_without_instances():
    stats = randomized_study(0, 0)
    assert stats.samples == [] and stats.median is None and stats.skipped == 0


def test_study_is_deterministic():
    opts = StudyOptions(N=2)
    assert randomized_study(3, 3, opts).to_json() == randomized_study(3, 3, opts).to_json()


def test_convex_oracle_matches_admm():
    for idx in range(3):
        rng = np.random.default_rng([11, idx])
        net = random_quadrant_network(rng, N=3, single_region=True)
        x = [rng.uniform(-2.0, 2.0, size=2) for _ in range(net.M)]
        try:
            best = global_optimum(net, x)
        except InfeasibleProblemError:
            continue
        guesses = [np.zeros((net.N, 1)) for _ in range(net.M)]
        dr = d_rout(net, x, guesses)
        res = sw_admm(net, x, guesses, [r.bundle.copies for r in dr],
                      AdmmOptions(rho=1.0, T_admm=3000, T_cut=0, target_residual=1e-9))
        V = global_value(net, x, [b.u for b in res.bundles], tol=1e-6)
        assert abs(V - best.best_value) <= 1e-4 * best.best_value


# ---------------------------------------------------------------- properties

gain = st.floats(-1.5, 1.5, allow_nan=False, allow_infinity=False)
coord = st.floats(-3, 3, allow_nan=False, allow_infinity=False)
lattice = st.integers(-6, 6).map(lambda v: 0.5 * v)


@st.composite
def pair_instance(draw):
    a = ((draw(gain), draw(gain)), (draw(gain), draw(gain)))
    cpl = (draw(st.floats(-0.3, 0.3)), draw(st.floats(-0.3, 0.3)))
    net = scalar_pair(a, coupling=cpl, N=2, x_bound=4.0, u_bound=1.0)
    x = [np.array([draw(st.one_of(coord, lattice))]) for _ in range(2)]
    return net, x


def optimum_or_none(net, x, method):
    try:
        return global_optimum(net, x, method)
    except InfeasibleProblemError:
        return None


@given(pair_instance())
def test_branch_and_bound_agrees_with_enumeration(case):
    net, x = case
    full = optimum_or_none(net, x, "enumerate")
    bnb = optimum_or_none(net, x, "branch_and_bound")
    assert (full is None) == (bnb is None)
    if full is None:
        return
    assert bnb.best_value == pytest.approx(full.best_value, rel=1e-6, abs=1e-8)
    # the reported minimizer replays to the reported value
    assert global_value(net, x, bnb.best_u, tol=1e-6) == pytest.approx(bnb.best_value, rel=1e-6, abs=1e-8)


@given(pair_instance(), st.integers(0, 2**32 - 1))
def test_best_value_bounds_every_sequence(case, seed):
    net, x = case
    best = optimum_or_none(net, x, "enumerate")
    assume(best is not None)
    rng = np.random.default_rng(seed)
    for _ in range(3):
        seqs = [tuple(rng.integers(0, 2, size=net.N + 1)) for _ in range(2)]
        sol = solve_sequence_problem(net, x, seqs)
        if sol.ok:
            assert best.best_value <= sol.value + 1e-8 * (1 + sol.value)


@given(pair_instance(), st.lists(st.floats(-1, 1), min_size=4, max_size=4))
def test_feasible_inputs_are_covered_by_their_sequences(case, us):
    net, x = case
    u = [np.array(us[:2]).reshape(2, 1), np.array(us[2:]).reshape(2, 1)]
    V = global_value(net, x, u)
    assume(math.isfinite(V))
    dr = d_rout(net, x, u)
    # the sequence the input generates admits the input, so its optimum is no worse
    for s0 in eval_switching(net, 0, x[0], u[0], dr[0].bundle.copies):
        for s1 in eval_switching(net, 1, x[1], u[1], dr[1].bundle.copies):
            sol = solve_sequence_problem(net, x, [s0, s1])
            assert sol.ok and sol.value <= V + 1e-7 * (1 + V)
    assert global_optimum(net, x).best_value <= V + 1e-7 * (1 + V)
