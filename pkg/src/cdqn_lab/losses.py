"""DQN, MSBE and C-DQN per-sample losses with their exact gradients.

Shapes: half squared error, Huber (half squared below 1, linear above), and
Huber in a square-root-squashed value space (``TRANSFORMED``). The C-DQN loss
is the per-sample maximum of the DQN loss (bootstrapping through the frozen
target network) and the MSBE loss (bootstrapping through the online network,
differentiated). Ties go to the DQN branch.

The max over next actions is resolved by ``np.argmax`` (lowest index wins),
which fixes the subgradient used at ties.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .approx import ApproxModel, _forward_cache, backward, forward


class LossKind(enum.Enum):
    DQN = "dqn"
    MSBE = "msbe"
    CDQN = "cdqn"


class Shape(enum.Enum):
    SQUARED = "squared"
    HUBER = "huber"
    TRANSFORMED = "transformed"


DQN_BRANCH, MSBE_BRANCH = 0, 1


@dataclass(frozen=True)
class LossSpec:
    kind: LossKind = LossKind.CDQN
    shape: Shape = Shape.SQUARED
    double_q: bool = False
    eps_T: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "kind", LossKind(self.kind))
        object.__setattr__(self, "shape", Shape(self.shape))
        if self.shape is Shape.TRANSFORMED and not self.eps_T > 0:
            raise ValueError(f"eps_T must be positive for the transformed loss, got {self.eps_T}")


@dataclass(frozen=True)
class TargetNetwork:
    params: np.ndarray
    version: int = 0

    def __post_init__(self):
        p = np.array(self.params, dtype=float)
        p.setflags(write=False)
        object.__setattr__(self, "params", p)


def update_target(target: TargetNetwork, previous_step_params) -> TargetNetwork:
    """Next target snapshot from the parameters one optimizer step back."""
    if previous_step_params is None:
        raise RuntimeError("no previous-step parameters: take an optimizer step first")
    return TargetNetwork(previous_step_params, target.version + 1)


class TargetTracker:
    """Keeps the previous-step parameters so the target never equals the online net."""

    def __init__(self, params):
        self.target = TargetNetwork(params, 0)
        self._prev = None

    def before_step(self, params):
        """Call with the parameters about to be overwritten by an optimizer step."""
        self._prev = np.array(params, dtype=float)

    def update(self) -> bool:
        """Swap in the previous-step snapshot. A second call with no step in between is a no-op."""
        if self._prev is None:
            return False
        self.target = update_target(self.target, self._prev)
        self._prev = None
        return True


# ---------------------------------------------------------------- transform

def transform(x, eps_T: float = 0.01):
    """T(x) = sign(x)(sqrt(|x|+1) - 1) + eps_T x."""
    x = np.asarray(x, dtype=float)
    return np.sign(x) * (np.sqrt(np.abs(x) + 1.0) - 1.0) + eps_T * x


def inverse_transform(f, eps_T: float = 0.01):
    """Inverse of :func:`transform`.

    Uses sign(f)(a^2 - 1) with a = (sqrt(1 + 4 eps(|f| + 1 + eps)) - 1)/(2 eps),
    rewritten as a = 2(|f| + 1 + eps)/(sqrt(...) + 1) and a^2 - 1 = (a-1)(a+1)
    to avoid cancellation.
    """
    f = np.asarray(f, dtype=float)
    af = np.abs(f)
    root = np.sqrt(1.0 + 4.0 * eps_T * (af + 1.0 + eps_T))
    a = 2.0 * (af + 1.0 + eps_T) / (root + 1.0)
    return np.sign(f) * (a - 1.0) * (a + 1.0)


def transform_grad(x, eps_T: float = 0.01):
    x = np.asarray(x, dtype=float)
    return 0.5 / np.sqrt(np.abs(x) + 1.0) + eps_T


def inverse_transform_grad(f, eps_T: float = 0.01):
    return 1.0 / transform_grad(inverse_transform(f, eps_T), eps_T)


# ------------------------------------------------------------------ shapes

def shape_value(d, shape: Shape):
    d = np.asarray(d, dtype=float)
    if shape is Shape.SQUARED:
        return 0.5 * d * d
    ad = np.abs(d)
    return np.where(ad < 1.0, 0.5 * d * d, ad - 0.5)


def shape_grad(d, shape: Shape):
    d = np.asarray(d, dtype=float)
    if shape is Shape.SQUARED:
        return d
    return np.where(np.abs(d) < 1.0, d, np.sign(d))


# ----------------------------------------------------------------- batches

@dataclass
class Batch:
    """Transitions as arrays. ``x`` and ``x_next`` are feature rows.

    ``mask_next`` (optional, bool (B, A)) marks the legal actions at s'; the
    max over next actions then ignores illegal outputs.
    """

    x: np.ndarray
    a: np.ndarray
    r: np.ndarray
    x_next: np.ndarray
    terminal: np.ndarray
    mask_next: np.ndarray | None = None

    def __len__(self):
        return len(self.a)

    @classmethod
    def from_transitions(cls, transitions, features, action_mask=None):
        """``action_mask`` (bool (n_states, A)) supplies mask_next when given."""
        ts = list(transitions)
        if not ts:
            raise ValueError("empty batch")
        f = np.asarray(features, dtype=float)
        sn = [t.s_next for t in ts]
        mask = None if action_mask is None else np.asarray(action_mask, dtype=bool)[sn]
        return cls(f[[t.s for t in ts]], np.array([t.a for t in ts], dtype=np.int64),
                   np.array([t.r for t in ts], dtype=float), f[sn],
                   np.array([t.terminal for t in ts], dtype=bool), mask)


@dataclass
class LossTerms:
    """Per-sample quantities of one loss evaluation."""

    loss: np.ndarray
    branch: np.ndarray
    residual: np.ndarray        # prediction minus target of the active branch
    res_dqn: np.ndarray
    res_msbe: np.ndarray
    l_dqn: np.ndarray
    l_msbe: np.ndarray
    d_q: np.ndarray             # d loss / d online output at (s, a)
    d_qn: np.ndarray            # d loss / d online output at s', column b_msbe
    b_msbe: np.ndarray


def _terms(q_s, q_sn, qt_sn, b: Batch, spec: LossSpec, gamma: float) -> LossTerms:
    n = len(b)
    rows = np.arange(n)
    live = ~b.terminal
    pred = q_s[rows, b.a]
    sel_on, sel_t = q_sn, qt_sn
    if b.mask_next is not None:
        sel_on = np.where(b.mask_next, q_sn, -np.inf)
        sel_t = np.where(b.mask_next, qt_sn, -np.inf)
    # DQN branch: bootstrap from the target net, action chosen by target or online net
    a_dqn = np.argmax(sel_on, axis=1) if spec.double_q else np.argmax(sel_t, axis=1)
    boot_dqn = np.where(live, qt_sn[rows, a_dqn], 0.0)
    b_msbe = np.argmax(sel_on, axis=1)
    boot_msbe = np.where(live, q_sn[rows, b_msbe], 0.0)
    if spec.shape is Shape.TRANSFORMED:
        e = spec.eps_T
        in_d = b.r + gamma * np.where(live, inverse_transform(boot_dqn, e), 0.0)
        in_m = b.r + gamma * np.where(live, inverse_transform(boot_msbe, e), 0.0)
        y_d, y_m = transform(in_d, e), transform(in_m, e)
        dy_m = np.where(live, transform_grad(in_m, e) * gamma * inverse_transform_grad(boot_msbe, e), 0.0)
    else:
        y_d = b.r + gamma * boot_dqn
        y_m = b.r + gamma * boot_msbe
        dy_m = np.where(live, gamma, 0.0)
    res_d, res_m = pred - y_d, pred - y_m
    l_d, l_m = shape_value(res_d, spec.shape), shape_value(res_m, spec.shape)
    if spec.kind is LossKind.DQN:
        branch = np.full(n, DQN_BRANCH)
    elif spec.kind is LossKind.MSBE:
        branch = np.full(n, MSBE_BRANCH)
    else:
        branch = np.where(l_d >= l_m, DQN_BRANCH, MSBE_BRANCH)
    use_m = branch == MSBE_BRANCH
    res = np.where(use_m, res_m, res_d)
    g = shape_grad(res, spec.shape)
    d_qn = np.where(use_m, -g * dy_m, 0.0)
    return LossTerms(np.where(use_m, l_m, l_d), branch, res, res_d, res_m, l_d, l_m, g, d_qn, b_msbe)


def evaluate(batch: Batch, online: ApproxModel, target_params, spec: LossSpec, gamma: float,
             params=None) -> LossTerms:
    p = online.params if params is None else params
    q_s = forward(online, batch.x, p)
    q_sn = forward(online, batch.x_next, p)
    qt_sn = forward(online, batch.x_next, np.asarray(target_params, dtype=float))
    return _terms(q_s, q_sn, qt_sn, batch, spec, gamma)


def batch_loss_and_grad(batch: Batch, weights, online: ApproxModel, target_params, spec: LossSpec,
                        gamma: float, params=None):
    """Mean of w_i * loss_i and its gradient in the online parameters.

    Returns (loss, grad, terms). For C-DQN the gradient follows each sample's
    active branch.
    """
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    p = online.params if params is None else params
    x2 = np.concatenate([batch.x, batch.x_next])
    cache = _forward_cache(online, x2, p)
    out = cache[0][-1]
    q_s, q_sn = out[:n], out[n:]
    qt_sn = forward(online, batch.x_next, np.asarray(target_params, dtype=float))
    terms = _terms(q_s, q_sn, qt_sn, batch, spec, gamma)
    d_out = np.zeros_like(out)
    rows = np.arange(n)
    d_out[rows, batch.a] += w * terms.d_q / n
    np.add.at(d_out, (n + rows, terms.b_msbe), w * terms.d_qn / n)
    grad = backward(online, cache, d_out, p)
    return float(np.mean(w * terms.loss)), grad, terms


def batch_loss(batch, weights, online, target_params, spec, gamma, params=None) -> float:
    t = evaluate(batch, online, target_params, spec, gamma, params)
    w = np.ones(len(batch)) if weights is None else np.asarray(weights, dtype=float)
    return float(np.mean(w * t.loss))


def reported_mse(batch, online, target_params, spec, gamma, params=None) -> float:
    """Unscaled mean squared residual of the active branches, used for logging."""
    t = evaluate(batch, online, target_params, spec, gamma, params)
    return float(np.mean(t.residual ** 2))


def priority_magnitudes(batch, online, target_params, spec: LossSpec, gamma, params=None) -> np.ndarray:
    """|delta| per sample: DQN form, online form, or the max of both for C-DQN."""
    t = evaluate(batch, online, target_params, spec, gamma, params)
    if spec.kind is LossKind.DQN:
        return np.abs(t.res_dqn)
    if spec.kind is LossKind.MSBE:
        return np.abs(t.res_msbe)
    return np.maximum(np.abs(t.res_dqn), np.abs(t.res_msbe))


# ---------------------------------------------------------- per transition

def _single(t, features):
    return Batch.from_transitions([t], features)


def bellman_target(t, online: ApproxModel, target: TargetNetwork, spec: LossSpec, gamma, features) -> float:
    """Target of the DQN branch for one transition (in transformed space when applicable)."""
    b = _single(t, features)
    terms = evaluate(b, online, target.params, spec, gamma)
    pred = forward(online, b.x)[0, t.a]
    return float(pred - terms.res_dqn[0])


def per_sample_loss(t, online, target: TargetNetwork, spec: LossSpec, gamma, features):
    """(loss, branch) where branch is DQN_BRANCH or MSBE_BRANCH."""
    terms = evaluate(_single(t, features), online, target.params, spec, gamma)
    return float(terms.loss[0]), int(terms.branch[0])


def priority_magnitude(t, online, target: TargetNetwork, spec, gamma, features) -> float:
    return float(priority_magnitudes(_single(t, features), online, target.params, spec, gamma)[0])
