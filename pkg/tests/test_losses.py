import numpy as np
import pytest
from hypothesis import given, strategies as st

from cdqn_lab.approx import ApproxModel, init_model, numeric_gradient
from cdqn_lab.losses import (DQN_BRANCH, MSBE_BRANCH, Batch, LossKind, LossSpec, Shape, TargetNetwork,
                             TargetTracker, batch_loss, batch_loss_and_grad, bellman_target, evaluate,
                             inverse_transform, per_sample_loss, priority_magnitude, shape_value, transform,
                             update_target)
from cdqn_lab.mdp import Transition

FEATS = np.array([[1.0], [1.0]])
T = Transition(0, 0, 1.0, 1, False)


def _linear(w0, w1):
    return ApproxModel(1, (), 2, np.array([w0, w1]), bias=False)


def test_huber_values():
    assert shape_value(0.5, Shape.HUBER) == pytest.approx(0.125)
    assert shape_value(-3.0, Shape.HUBER) == pytest.approx(2.5)
    assert shape_value(3.0, Shape.SQUARED) == pytest.approx(4.5)


def test_double_q_target():
    online = _linear(2.0, 1.0)          # online argmax at s' is action 0
    target = TargetNetwork(np.array([1.0, 5.0]))
    y = bellman_target(T, online, target, LossSpec("dqn", double_q=True), 0.9, FEATS)
    assert y == pytest.approx(1.9)
    y = bellman_target(T, online, target, LossSpec("dqn", double_q=False), 0.9, FEATS)
    assert y == pytest.approx(5.5)


def test_branches_coincide_when_target_equals_online():
    m = init_model(2, (3,), 2, 0)
    b = Batch(np.eye(2), np.array([0, 1]), np.array([1.0, -1.0]), np.eye(2)[::-1], np.array([False, False]))
    for shape in Shape:
        t = evaluate(b, m, m.params, LossSpec("cdqn", shape), 0.9)
        np.testing.assert_allclose(t.l_dqn, t.l_msbe, rtol=0, atol=1e-15)
        assert np.all(t.branch == DQN_BRANCH)  # ties go to the DQN branch


def test_cdqn_takes_the_larger_branch():
    online = _linear(0.0, 0.0)
    target = TargetNetwork(np.array([10.0, 10.0]))
    loss, which = per_sample_loss(T, online, target, LossSpec("cdqn"), 0.9, FEATS)
    # DQN residual 0 - (1 + 9) = -10, MSBE residual -1
    assert which == DQN_BRANCH and loss == pytest.approx(50.0)
    target = TargetNetwork(np.array([-10.0, -10.0]))
    online = _linear(3.0, 3.0)
    loss, which = per_sample_loss(T, online, target, LossSpec("cdqn"), 0.9, FEATS)
    # DQN residual 3 - (1 - 9) = 11; MSBE residual 3 - (1 + 2.7) = -0.7
    assert which == DQN_BRANCH
    online = _linear(-5.0, -5.0)
    target = TargetNetwork(np.array([-50.0 / 9.0, -50.0]))
    loss, which = per_sample_loss(T, online, target, LossSpec("cdqn"), 0.9, FEATS)
    # DQN: -5 - (1 - 5) = -1; MSBE: -5 - (1 - 4.5) = -1.5
    assert which == MSBE_BRANCH and loss == pytest.approx(1.125)


def test_priority_magnitude_kinds():
    online = _linear(0.0, 0.0)
    target = TargetNetwork(np.array([10.0 / 9.0 * 0.2, 0.0]))
    # DQN residual -(1 + 0.2) = -1.2, online residual -1
    for kind, want in (("dqn", 1.2), ("msbe", 1.0), ("cdqn", 1.2)):
        assert priority_magnitude(T, online, target, LossSpec(kind), 0.9, FEATS) == pytest.approx(want)


def test_terminal_transitions_do_not_bootstrap():
    online = _linear(2.0, 7.0)
    t = Transition(0, 0, 1.0, 1, True)
    y = bellman_target(t, online, TargetNetwork(np.array([100.0, 100.0])), LossSpec("dqn"), 0.9, FEATS)
    assert y == pytest.approx(1.0)


def test_transformed_target():
    online = _linear(0.0, 0.0)
    target = TargetNetwork(np.array([4.0, 0.0]))
    spec = LossSpec("dqn", "transformed")
    y = bellman_target(T, online, target, spec, 0.9, FEATS)
    assert y == pytest.approx(float(transform(1.0 + 0.9 * inverse_transform(4.0))))


def test_mask_excludes_illegal_successor_actions():
    m = ApproxModel(2, (), 2, np.array([0.0, 0.0, 0.0, 100.0]), bias=False)   # W rows per action
    b = Batch(np.array([[1.0, 0.0]]), np.array([0]), np.array([0.0]), np.array([[0.0, 1.0]]),
              np.array([False]), mask_next=np.array([[True, False]]))
    t = evaluate(b, m, m.params, LossSpec("dqn"), 0.9)
    assert t.res_dqn[0] == pytest.approx(0.0)


@given(st.floats(-1e6, 1e6))
def test_transform_roundtrip(x):
    assert abs(float(inverse_transform(transform(x))) - x) <= 1e-9 * max(1.0, abs(x))


def test_transform_is_increasing():
    x = np.linspace(-1e3, 1e3, 2001)
    assert np.all(np.diff(transform(x)) > 0)


def test_target_tracker_trails_by_one_step():
    tr = TargetTracker(np.zeros(2))
    assert tr.update() is False and tr.target.version == 0
    tr.before_step(np.array([1.0, 2.0]))
    assert tr.update() is True
    np.testing.assert_array_equal(tr.target.params, [1.0, 2.0])
    assert tr.target.version == 1
    assert tr.update() is False   # second call without a step is a no-op
    with pytest.raises(RuntimeError):
        update_target(tr.target, None)
    with pytest.raises(ValueError):
        tr.target.params[0] = 5.0


def test_gradient_small_case(rng):
    m = init_model(3, (4,), 2, rng)
    b = Batch(rng.normal(size=(5, 3)), rng.integers(2, size=5), rng.normal(size=5), rng.normal(size=(5, 3)),
              np.array([False, True, False, False, True]))
    tp = m.params + 0.5 * rng.normal(size=m.params.size)
    spec = LossSpec(LossKind.CDQN, Shape.HUBER, True)
    _, g, _ = batch_loss_and_grad(b, None, m, tp, spec, 0.95)
    ng = numeric_gradient(lambda p: batch_loss(b, None, m, tp, spec, 0.95, p), m.params, 1e-6)
    np.testing.assert_allclose(g, ng, rtol=1e-5, atol=1e-8)


def test_spec_validation():
    with pytest.raises(ValueError):
        LossSpec("cdqn", "transformed", eps_T=0.0)
    with pytest.raises(ValueError):
        LossSpec("other")
