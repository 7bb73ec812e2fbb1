"""Small differentiable Q-function approximators on a flat parameter vector.

A model maps state features to one value per action through rectified-linear
hidden layers. ``hidden=()`` gives a linear model. Parameters are stored
layer by layer as (W, b) with W of shape (out, in); the bias block is absent
when ``bias=False``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

CHECKPOINT_FORMAT = 1


@dataclass
class ApproxModel:
    n_features: int
    hidden: tuple
    n_actions: int
    params: np.ndarray
    bias: bool = True

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.params = np.asarray(self.params, dtype=float)
        if self.n_features < 1 or self.n_actions < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("layer widths must be positive")
        if self.params.shape != (param_count(self.n_features, self.hidden, self.n_actions, self.bias),):
            raise ValueError(f"parameter vector of length {self.params.size} does not fit the architecture")

    @property
    def sizes(self) -> list:
        return [self.n_features, *self.hidden, self.n_actions]

    def layers(self, params=None):
        """Views (W, b) per layer into ``params`` (default: own params). b is None without bias."""
        p = self.params if params is None else params
        out, i = [], 0
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            w = p[i:i + fan_in * fan_out].reshape(fan_out, fan_in)
            i += fan_in * fan_out
            b = None
            if self.bias:
                b = p[i:i + fan_out]
                i += fan_out
            out.append((w, b))
        return out

    def with_params(self, params) -> "ApproxModel":
        return replace(self, params=np.array(params, dtype=float))

    def copy(self) -> "ApproxModel":
        return self.with_params(self.params.copy())


def param_count(n_features, hidden, n_actions, bias=True) -> int:
    sizes = [n_features, *hidden, n_actions]
    return sum(i * o + (o if bias else 0) for i, o in zip(sizes[:-1], sizes[1:]))


def init_model(n_features: int, hidden=(64, 64), n_actions: int = 2, rng=None, bias: bool = True) -> ApproxModel:
    """Fan-in scaled normal weights (std sqrt(2/fan_in)), zero biases."""
    rng = np.random.default_rng(rng)
    m = ApproxModel(n_features, tuple(hidden), n_actions,
                    np.zeros(param_count(n_features, hidden, n_actions, bias)), bias)
    for w, _ in m.layers():
        w[...] = rng.normal(scale=np.sqrt(2.0 / w.shape[1]), size=w.shape)
    return m


def _check_inputs(model, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != model.n_features:
        raise ValueError(f"expected features of dimension {model.n_features}, got shape {x.shape}")
    return x2, single


def _forward_cache(model, x2, params=None):
    acts = [x2]
    pre = []
    h = x2
    layers = model.layers(params)
    for li, (w, b) in enumerate(layers):
        z = h @ w.T
        if b is not None:
            z = z + b
        pre.append(z)
        h = z if li == len(layers) - 1 else np.maximum(z, 0.0)
        acts.append(h)
    return acts, pre


def forward(model: ApproxModel, x, params=None) -> np.ndarray:
    """Per-action values for a feature vector (shape (A,)) or a batch (shape (B, A))."""
    x2, single = _check_inputs(model, x)
    out = _forward_cache(model, x2, params)[0][-1]
    return out[0] if single else out


def backward(model: ApproxModel, cache, d_out: np.ndarray, params=None) -> np.ndarray:
    """Flat gradient given dLoss/dOutput for a cached batch forward pass."""
    acts, pre = cache
    layers = model.layers(params)
    grads = []
    g = np.asarray(d_out, dtype=float).reshape(pre[-1].shape)
    for li in range(len(layers) - 1, -1, -1):
        w, b = layers[li]
        if li != len(layers) - 1:
            g = g * (pre[li] > 0.0)  # derivative 0 at the kink
        gw = g.T @ acts[li]
        grads.append(g.sum(axis=0) if b is not None else None)
        grads.append(gw)
        g = g @ w
    flat = [a.ravel() for a in reversed(grads) if a is not None]
    return np.concatenate(flat)


def gradient(model: ApproxModel, inputs, loss_fn, params=None):
    """Value and flat gradient of ``loss_fn(outputs) -> (loss, dloss/doutputs)``.

    ``outputs`` has shape (B, n_actions) for the batch ``inputs``.
    """
    x2, _ = _check_inputs(model, inputs)
    cache = _forward_cache(model, x2, params)
    loss, d_out = loss_fn(cache[0][-1])
    return float(loss), backward(model, cache, d_out, params)


def numeric_gradient(f, params, step=1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of a flat vector."""
    p = np.array(params, dtype=float)
    g = np.empty_like(p)
    for i in range(p.size):
        old = p[i]
        p[i] = old + step
        fp = f(p)
        p[i] = old - step
        fm = f(p)
        p[i] = old
        g[i] = (fp - fm) / (2 * step)
    return g


@dataclass
class OptimizerState:
    """Adam state. ``eps_a`` is added after the square root of the second moment."""

    lr: float = 6.25e-5
    eps_a: float = 1.5e-4
    clip_norm: float | None = 10.0
    beta1: float = 0.9
    beta2: float = 0.999
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.eps_a <= 0:
            raise ValueError("lr and eps_a must be positive")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive or None")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")


def clip_gradient(grad, clip_norm):
    """Rescale to norm ``clip_norm`` when the l2 norm exceeds it."""
    grad = np.asarray(grad, dtype=float)
    if clip_norm is None:
        return grad
    n = np.linalg.norm(grad)
    return grad * (clip_norm / n) if n > clip_norm else grad


def optimizer_step(opt: OptimizerState, params, grad) -> np.ndarray:
    """One bias-corrected Adam step after optional norm clipping. Returns new params."""
    params = np.asarray(params, dtype=float)
    grad = clip_gradient(grad, opt.clip_norm)
    if grad.shape != params.shape:
        raise ValueError("gradient and parameters differ in shape")
    if opt.m is None:
        opt.m = np.zeros_like(params)
        opt.v = np.zeros_like(params)
    elif opt.m.shape != params.shape:
        raise ValueError("optimizer moments do not match the parameters")
    opt.step += 1
    opt.m = opt.beta1 * opt.m + (1 - opt.beta1) * grad
    opt.v = opt.beta2 * opt.v + (1 - opt.beta2) * grad * grad
    m_hat = opt.m / (1 - opt.beta1 ** opt.step)
    v_hat = opt.v / (1 - opt.beta2 ** opt.step)
    return params - opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps_a)


def semi_gradient_step(model: ApproxModel, t, gamma: float, alpha: float, features) -> np.ndarray:
    """TD(0) step: theta + alpha * dQ(s,a)/dtheta * (r + gamma max Q(s',.) - Q(s,a)).

    The bootstrapped target is held constant. ``features[s]`` is phi(s).
    Returns the new parameters.
    """
    phi = np.asarray(features[t.s], dtype=float)
    target = t.r
    if not t.terminal:
        target += gamma * float(np.max(forward(model, np.asarray(features[t.s_next], dtype=float))))

    def loss(out):
        d = np.zeros_like(out)
        d[0, t.a] = -(target - out[0, t.a])
        return 0.5 * (target - out[0, t.a]) ** 2, d

    _, g = gradient(model, phi, loss)
    return model.params - alpha * g


def one_hot_features(n_states: int) -> np.ndarray:
    return np.eye(n_states)


# ------------------------------------------------------------- checkpoints

def save_checkpoint(path, model: ApproxModel, extra: dict | None = None):
    """npz with the flat parameters and a JSON architecture header."""
    header = {"format_version": CHECKPOINT_FORMAT, "n_features": model.n_features,
              "hidden": list(model.hidden), "n_actions": model.n_actions, "bias": model.bias,
              "extra": extra or {}}
    with open(path, "wb") as fh:
        np.savez(fh, params=model.params, header=np.array(json.dumps(header, sort_keys=True)))


def load_checkpoint(path) -> ApproxModel:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        params = z["params"].copy()
    if header.get("format_version") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {header.get('format_version')}")
    return ApproxModel(header["n_features"], tuple(header["hidden"]), header["n_actions"], params, header["bias"])
