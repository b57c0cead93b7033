import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_instance, standard_error, two_node
from nedmp.graph import Instance, build_graph, from_undirected
from nedmp.simulate import I, R, S, MarginalTrajectory, estimate_marginals, simulate_once


def _ever_infected_oracle(beta, gamma):
    # node 1 is hit at step k+1 if the seed is still infected and has failed k times
    return beta / (1 - (1 - beta) * (1 - gamma))


def test_zero_beta_non_seeds_stay_susceptible():
    inst = Instance(from_undirected(4, [(0, 1), (1, 2), (2, 3)], 0.0, 0.5), [0], 10)
    traj = simulate_once(inst, np.random.default_rng(0))
    assert np.all(traj[:, 1:] == S)
    P = estimate_marginals(inst, 500, seed=1)
    assert np.all(P.ps[:, 1:] == 1.0)


def test_unit_gamma_seed_recovers_at_once():
    inst = Instance(from_undirected(3, [(0, 1), (1, 2)], 0.7, 1.0), [1], 6)
    for s in range(20):
        traj = simulate_once(inst, np.random.default_rng(s))
        assert traj[0, 1] == I
        assert np.all(traj[1:, 1] == R)


def test_trajectory_transitions_are_legal():
    inst = random_instance("erdos_renyi", 10, np.random.default_rng(2))
    for s in range(10):
        traj = simulate_once(inst, np.random.default_rng(s))
        assert traj.shape == (31, 10)
        assert np.array_equal(traj[0], np.where(inst.seed_mask(), I, S))
        prev, nxt = traj[:-1], traj[1:]
        assert not np.any((prev == S) & (nxt == R))
        assert not np.any((prev == I) & (nxt == S))
        assert not np.any((prev == R) & (nxt != R))


def test_two_node_ever_infected_probability():
    inst = two_node()
    n = 100_000
    P = estimate_marginals(inst, n, seed=11)
    oracle = _ever_infected_oracle(0.5, 0.5)
    assert oracle == pytest.approx(2 / 3)
    ever = 1 - P.ps[-1, 1]
    assert abs(ever - oracle) <= 4 * standard_error(oracle, n)
    assert abs(P.ps[30, 1] - 1 / 3) <= 4 * standard_error(1 / 3, n)


def test_seed_row_is_deterministic():
    inst = random_instance("tree", 8, np.random.default_rng(4), n_seeds=2)
    for runs in (1, 7, 300):
        P = estimate_marginals(inst, runs, seed=0)
        assert np.array_equal(P.pi[0], inst.seed_mask().astype(float))
        assert np.array_equal(P.ps[0], 1 - inst.seed_mask())
        assert np.all(P.pr[0] == 0)


def test_rows_sum_to_one_exactly_and_monotone():
    inst = random_instance("watts_strogatz", 12, np.random.default_rng(8))
    P = estimate_marginals(inst, 3000, seed=2)
    assert np.all(P.ps + P.pi + P.pr == pytest.approx(1.0, abs=1e-12))
    assert np.all(np.diff(P.ps, axis=0) <= 0)
    assert np.all(np.diff(P.pr, axis=0) >= 0)


def test_bit_reproducible_and_seed_sensitive():
    inst = random_instance("grid", 12, np.random.default_rng(1))
    a = estimate_marginals(inst, 2500, seed=5, block_size=1000)
    b = estimate_marginals(inst, 2500, seed=5, block_size=1000)
    c = estimate_marginals(inst, 2500, seed=6, block_size=1000)
    assert a == b
    assert not a == c


def test_blocks_use_independent_substreams():
    # the first block of a longer estimate is the same as a short estimate
    inst = random_instance("tree", 10, np.random.default_rng(3))
    short = estimate_marginals(inst, 1000, seed=9, block_size=1000)
    longer = estimate_marginals(inst, 2000, seed=9, block_size=1000)
    second = 2 * longer.stack() - short.stack()
    assert np.all((second >= -1e-12) & (second <= 1 + 1e-12))
    assert not np.allclose(second, short.stack())


def test_stop_early_is_identical():
    inst = random_instance("erdos_renyi", 10, np.random.default_rng(6), gamma=(0.6, 0.9))
    assert estimate_marginals(inst, 2000, seed=3) == estimate_marginals(inst, 2000, seed=3, stop_early=True)


def test_bad_run_count():
    with pytest.raises(ValueError):
        estimate_marginals(two_node(), 0)


def test_csv_round_trip(tmp_path):
    P = estimate_marginals(two_node(horizon=4), 1000, seed=0)
    text = P.to_csv(tmp_path / "p.csv", header_comment="provenance line")
    lines = text.splitlines()
    assert lines[0] == "# provenance line"
    assert lines[1] == "t,node,ps,pi,pr"
    assert lines[2] == "0,0,0.000000,1.000000,0.000000"
    assert len(lines) == 2 + 5 * 2
    back = MarginalTrajectory.from_csv(tmp_path / "p.csv")
    assert np.allclose(back.stack(), P.stack(), atol=5e-7)


def test_beta_one_always_transmits():
    inst = Instance(build_graph(2, [(0, 1, 1.0), (1, 0, 1.0)], [0.5, 0.5]), [0], 3)
    P = estimate_marginals(inst, 200, seed=0)
    assert P.ps[1, 1] == 0.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 4))
def test_marginal_invariants(seed, n_seeds):
    rng = np.random.default_rng(seed)
    inst = random_instance("erdos_renyi", 8, rng, horizon=8, beta=(0, 1), gamma=(0, 1), n_seeds=n_seeds)
    P = estimate_marginals(inst, 200, seed=seed)
    assert np.allclose(P.ps + P.pi + P.pr, 1.0, atol=1e-12)
    assert np.all((P.stack() >= 0) & (P.stack() <= 1))
    assert np.all(np.diff(P.ps, axis=0) <= 0) and np.all(np.diff(P.pr, axis=0) >= 0)
