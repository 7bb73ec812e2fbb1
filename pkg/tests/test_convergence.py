import numpy as np
import pytest
from hypothesis import given, strategies as st

from cdqn_lab.approx import ApproxModel, one_hot_features
from cdqn_lab.harness.convergence import (LinearProblem, build_divergence_instance, clarke_stationarity,
                                          divergence_problem, loss_cdqn, loss_dqn, loss_msbe, minimize_cdqn,
                                          minimize_dqn, outer_iteration, run_cdqn_convergence_check, solve_qp,
                                          subgradient_cdqn)
from cdqn_lab.harness.training import action_mask
from cdqn_lab.losses import Batch, LossSpec, batch_loss
from cdqn_lab.mdp import bellman_backup, build_cliff_walking, random_mdp, value_iteration


def test_qp_box_projection():
    # min 1/2 |x - c|^2 over x <= 1 is a clip
    c = np.array([2.0, -0.5, 1.0, 3.0])
    x, lam, polished = solve_qp(np.eye(4), -c, np.eye(4), np.ones(4))
    assert polished
    np.testing.assert_allclose(x, np.minimum(c, 1.0), atol=1e-12)
    # multipliers of the clipped coordinates equal the excess
    np.testing.assert_allclose(lam, np.maximum(c - 1.0, 0.0), atol=1e-9)


def test_qp_with_equality():
    # min 1/2 |x|^2 s.t. x0 + x1 = 1, x0 >= 0.8
    x, _, _ = solve_qp(np.eye(2), np.zeros(2), np.array([[-1.0, 0.0]]), np.array([-0.8]),
                       np.array([[1.0, 1.0]]), np.array([1.0]))
    np.testing.assert_allclose(x, [0.8, 0.2], atol=1e-12)


def _divergence_losses(w, wt, gamma=0.9):
    u = w - 2 * gamma * wt
    v = w - 2 * gamma * w
    return 0.5 * max(u * u, v * v), 0.5 * u * u, 0.5 * v * v


@given(st.floats(-5, 5), st.floats(-5, 5))
def test_divergence_losses_closed_form(w, wt):
    prob = divergence_problem(0.9)
    c, d, m = _divergence_losses(w, wt)
    assert loss_cdqn(prob, [w], [wt]) == pytest.approx(c, rel=1e-12, abs=1e-300)
    assert loss_dqn(prob, [w], [wt]) == pytest.approx(d, rel=1e-12, abs=1e-300)
    assert loss_msbe(prob, [w]) == pytest.approx(m, rel=1e-12, abs=1e-300)


def test_divergence_instance_matches_problem():
    mdp, model, feats = build_divergence_instance()
    assert mdp.n_states == 2 and not mdp.terminal.any()
    prob = divergence_problem(0.9)
    b = Batch.from_transitions([mdp.transition(0, 0)], feats)
    for kind, ref in (("cdqn", loss_cdqn), ("dqn", loss_dqn)):
        for w, wt in ((1.0, 1.0), (0.3, -2.0), (4.0, 0.5)):
            got = batch_loss(b, None, model, np.array([wt]), LossSpec(kind), 0.9, np.array([w]))
            assert got == pytest.approx(ref(prob, [w], [wt]), rel=1e-12)


def test_dqn_outer_loop_on_divergence_instance_grows_geometrically():
    # argmin_w (w - 1.8 wt)^2 is 1.8 wt
    run = outer_iteration(divergence_problem(0.9), "dqn", 20, theta0=[1.0])
    w = np.array([t[0] for t in run.thetas])
    np.testing.assert_allclose(w, 1.8 ** np.arange(21), rtol=1e-12)
    assert np.all(np.diff(run.msbe) > 0)


def test_cdqn_outer_loop_on_divergence_instance_is_stationary_at_target():
    # max((w - 1.8)^2, 0.64 w^2) is minimized where both branches meet, w = 1
    prob = divergence_problem(0.9)
    res = minimize_cdqn(prob, np.array([1.0]))
    assert res.theta[0] == pytest.approx(1.0, abs=1e-9)
    assert res.loss == pytest.approx(0.32, rel=1e-9)
    assert res.stationarity <= 1e-10
    run = outer_iteration(prob, "cdqn", 10, theta0=[1.0])
    np.testing.assert_allclose(run.chain, 0.32, rtol=1e-9)
    assert run.non_increasing


def test_cdqn_inner_minimum_from_other_targets():
    prob = divergence_problem(0.9)
    for wt in (2.0, -3.0, 0.25):
        res = minimize_cdqn(prob, np.array([wt]))
        grid = np.linspace(-10 * abs(wt), 10 * abs(wt), 200001)
        best = min(_divergence_losses(w, wt)[0] for w in grid[::50])
        assert res.loss <= best + 1e-12
        assert res.theta[0] == pytest.approx(wt, rel=1e-9)


def test_clarke_equals_gradient_norm_at_smooth_point(rng):
    mdp = random_mdp(rng, n_states=(4, 6))
    prob = LinearProblem.tabular(mdp, 0.9)
    theta = rng.normal(size=prob.dim)
    target = rng.normal(size=prob.dim)
    g = subgradient_cdqn(prob, theta, target)
    h = 1e-6
    num = np.array([(loss_cdqn(prob, theta + h * e, target) - loss_cdqn(prob, theta - h * e, target)) / (2 * h)
                    for e in np.eye(prob.dim)])
    np.testing.assert_allclose(g, num, rtol=1e-5, atol=1e-8)
    assert clarke_stationarity(prob, theta, target) == pytest.approx(np.linalg.norm(g), rel=1e-9)


def test_clarke_is_zero_at_a_kink_minimum():
    prob = divergence_problem(0.9)
    assert clarke_stationarity(prob, [1.0], [1.0]) <= 1e-12
    # a one-sided subgradient is far from zero there
    assert abs(subgradient_cdqn(prob, [1.0], [1.0])[0]) > 0.5


def test_tabular_dqn_outer_loop_is_value_iteration(rng):
    mdp = random_mdp(rng, n_states=(5, 8))
    prob = LinearProblem.tabular(mdp, 0.8)
    run = outer_iteration(prob, "dqn", 6)
    v = np.zeros(mdp.n_pairs)
    for i in range(6):
        v = bellman_backup(mdp, v, 0.8)
        np.testing.assert_allclose(run.thetas[i + 1], v, atol=1e-10)


def test_tabular_fixed_point_is_optimal_q():
    mdp = build_cliff_walking(4, 3)
    prob = LinearProblem.tabular(mdp, 0.9)
    qstar = value_iteration(mdp, 0.9).values
    res = minimize_cdqn(prob, qstar)
    np.testing.assert_allclose(res.theta, qstar, atol=1e-8)
    assert res.loss <= 1e-16
    assert loss_msbe(prob, qstar) <= 1e-20


def test_tabular_cdqn_loss_matches_network_loss(rng):
    # one-hot states and a bias-free linear net give Q(s, a) = params[a * nS + s]
    mdp = random_mdp(rng, n_states=(4, 7))
    prob = LinearProblem.tabular(mdp, 0.9)
    n_act = max(max(a) for a in mdp.legal if a) + 1
    feats = one_hot_features(mdp.n_states)
    b = Batch.from_transitions(mdp.transitions(), feats, action_mask(mdp, n_act))

    def to_params(theta):
        p = np.zeros(n_act * mdp.n_states)
        p[mdp.pair_action * mdp.n_states + mdp.pair_state] = theta
        return p

    model = ApproxModel(mdp.n_states, (), n_act, np.zeros(n_act * mdp.n_states), bias=False)
    for _ in range(5):
        theta, target = rng.normal(size=prob.dim), rng.normal(size=prob.dim)
        for kind, ref in (("cdqn", loss_cdqn), ("dqn", loss_dqn)):
            got = batch_loss(b, None, model, to_params(target), LossSpec(kind), 0.9, to_params(theta))
            assert got == pytest.approx(ref(prob, theta, target), rel=1e-12)


def test_convergence_check_on_small_instances(rng):
    probs = [LinearProblem.tabular(random_mdp(rng, n_states=(3, 6)), 0.9) for _ in range(5)]
    rep = run_cdqn_convergence_check(probs, "cdqn", 5, 1e-8, 1e-7)
    assert rep.passed and rep.n_pass == 5
    assert rep.max_stationarity <= 1e-8
    for run in rep.runs:
        assert run.max_increase <= 1e-7
    rel = run_cdqn_convergence_check(probs, "cdqn", 5, 1e-8, 1e-7, relaxed=True)
    assert rel.passed


def test_relaxed_step_never_raises_the_loss(rng):
    prob = LinearProblem.tabular(random_mdp(rng, n_states=(3, 6)), 0.9)
    run = outer_iteration(prob, "cdqn", 8, relaxed=True)
    for i, tt in enumerate(run.thetas[:-1]):
        assert run.chain[i] <= loss_cdqn(prob, tt, tt) + 1e-15


def test_minimize_dqn_is_least_squares(rng):
    prob = LinearProblem(rng.normal(size=(6, 3)), np.arange(6), rng.normal(size=6),
                         [None, np.array([1, 2]), None, np.array([0]), np.array([4, 5]), None], 0.9)
    target = rng.normal(size=3)
    res = minimize_dqn(prob, target)
    assert res.stationarity <= 1e-10
    for e in np.eye(3):
        assert loss_dqn(prob, res.theta + 1e-4 * e, target) >= res.loss
        assert loss_dqn(prob, res.theta - 1e-4 * e, target) >= res.loss


def test_problem_validation():
    with pytest.raises(ValueError):
        LinearProblem(np.eye(2), [], [], [], 0.9)
    with pytest.raises(ValueError):
        LinearProblem(np.eye(2), [0], [0.0], [None], 1.5)
