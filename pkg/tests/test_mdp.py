import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cdqn_lab.mdp import (ADVANCE, JUMP, RIGHT, UP, ConvergenceError, Episode, QTable, bellman_backup,
                          bellman_residual, build_cliff_walking, build_cycle_chain, build_mdp,
                          build_one_way_cliff, cliff_state, random_mdp, rollout, value_iteration)


def test_cliff_walking_layout():
    m = build_cliff_walking(10, 4)
    assert m.n_states == 40
    assert m.n_pairs == 106
    assert int((~m.terminal).sum()) == 31
    assert int(m.terminal.sum()) == 9  # 8 cliff cells and the goal
    # wall moves are not legal
    assert m.actions(cliff_state(0, 0, 10)) == (UP, RIGHT)
    t = m.transition(0, RIGHT)
    assert t.r == -100.0 and t.terminal


def test_cliff_walking_rejects_bad_sizes():
    with pytest.raises(ValueError):
        build_cliff_walking(1, 4)
    with pytest.raises(ValueError):
        build_cliff_walking(10, 1.5)


def test_cliff_optimal_value_closed_form():
    # up, nine steps right, then down into the goal: -(1 - g^10)/(1 - g)
    g = 0.9
    m = build_cliff_walking(10, 4)
    q = value_iteration(m, g)
    assert q[0, UP] == pytest.approx(-(1 - g ** 10) / (1 - g), abs=1e-9)
    ep, ret = rollout(m, q, 0.0, 0)
    assert ret == -10.0 and not ep.truncated


def test_one_way_cliff_values():
    m = build_one_way_cliff(8)
    q = value_iteration(m, 1.0)
    assert q[0, ADVANCE] == pytest.approx(16.0)
    assert q[0, JUMP] == pytest.approx(-1.0)
    assert rollout(m, q, 0.0, 0)[1] == 16.0


def test_pair_lookup_errors():
    m = build_one_way_cliff(3)
    with pytest.raises(KeyError):
        m.pair(m.n_states - 1, ADVANCE)


def test_build_mdp_validation():
    with pytest.raises(ValueError):
        build_mdp(2, {(0, 0): (5, 0.0)}, [False, True])
    with pytest.raises(ValueError):
        build_mdp(2, {}, [False, True])  # non-terminal state without actions


def test_cycle_chain_gamma_one_is_improper():
    m = build_cycle_chain(3, [1.0, 0.0, 0.0])
    with pytest.raises(ConvergenceError):
        value_iteration(m, 1.0)
    q = value_iteration(m, 0.5)
    # V(s0) = 1 + 0.5^3 V(s0)
    assert q[0, 0] == pytest.approx(1.0 / (1 - 0.125))


def test_episode_requires_a_step():
    with pytest.raises(ValueError):
        Episode(())


def _naive_backup(m, values, gamma):
    out = np.empty(m.n_pairs)
    for k in range(m.n_pairs):
        s, a = int(m.pair_state[k]), int(m.pair_action[k])
        sn = m.next(s, a)
        boot = 0.0 if m.terminal[sn] else max(values[m.pair(sn, b)] for b in m.actions(sn))
        out[k] = m.reward(s, a) + gamma * boot
    return out


@given(st.integers(0, 10_000), st.floats(0.0, 0.99))
def test_backup_matches_loop(seed, gamma):
    rng = np.random.default_rng(seed)
    m = random_mdp(rng)
    v = rng.normal(size=m.n_pairs)
    np.testing.assert_allclose(bellman_backup(m, v, gamma), _naive_backup(m, v, gamma), rtol=0, atol=1e-12)


@given(st.integers(0, 10_000), st.floats(0.0, 0.99))
def test_value_iteration_residual(seed, gamma):
    m = random_mdp(np.random.default_rng(seed))
    q = value_iteration(m, gamma, tol=1e-10)
    assert bellman_residual(q, gamma) <= 1e-10


def test_qtable_indexing():
    m = build_one_way_cliff(2)
    q = QTable(m)
    q[1, JUMP] = 3.0
    assert q.values[m.pair(1, JUMP)] == 3.0
    assert q.max_value(1) == 3.0
    assert q.greedy_actions(1) == [JUMP]
    assert math.isclose(q.copy()[1, JUMP], 3.0)
