"""Reward-frequency estimation, discount selection, value normalization and the epsilon schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mdp import Episode

GAMMA_MIN, GAMMA_MAX = 0.99, 0.9998


class NoRewardError(ValueError):
    """Every episode has zero return."""


class _NoReward:
    def __repr__(self):
        return "NO_REWARD"


NO_REWARD = _NoReward()


def _rewards(e) -> np.ndarray:
    return e.array() if isinstance(e, Episode) else np.asarray(e, dtype=float)


def decompose_sequence(e):
    """Split off one constant level.

    r' is the smallest nonzero entry. The level has r' wherever the input is
    nonzero and 0 elsewhere; the remainder is input minus level.
    """
    r = _rewards(e)
    nz = r != 0
    if not nz.any():
        raise ValueError("cannot decompose an all-zero episode")
    level = np.where(nz, r[nz].min(), 0.0)
    rest = r - level
    rest[np.isclose(rest, 0.0, rtol=0.0, atol=1e-12 * np.abs(r).max())] = 0.0
    return level, rest


def suffix_sums(r) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    return np.cumsum(r[::-1])[::-1]


def episode_lhat(e) -> float:
    """Return-weighted mean number of steps until the next reward on a 0/constant episode."""
    r = _rewards(e)
    nz = np.flatnonzero(r != 0)
    if nz.size == 0:
        raise ValueError("episode has no reward")
    if not np.allclose(r[nz], r[nz[0]]):
        raise ValueError("episode_lhat needs rewards that are 0 or a single constant")
    big_r = suffix_sums(r)
    idx = np.arange(len(r))
    # next rewarded step at or after i; suffixes past the last reward have R_i = 0
    pos = np.searchsorted(nz, idx)
    live = pos < nz.size
    l = np.zeros(len(r))
    l[live] = nz[pos[live]] - idx[live] + 1
    w = np.where(live, big_r, 0.0)
    return float(np.sum(w * l) / np.sum(w))


def episode_frequency(e):
    """(f_k, w_k) for one episode; (None, 0) for a zero-return episode."""
    r = np.abs(_rewards(e))
    w = math.sqrt(r.sum())
    if w == 0.0:
        return None, 0.0
    num = den = 0.0
    rest = r
    while np.any(rest != 0):
        level, rest = decompose_sequence(rest)
        r0 = level.sum()
        num += r0 * episode_lhat(level)
        den += r0
    return den / num, w


def estimate_frequency(episodes) -> float:
    """Weighted RMS over episodes of the inverse expected distance to the next reward.

    Raises NoRewardError when no episode has a reward.
    """
    episodes = list(episodes)
    if not episodes:
        raise ValueError("estimate_frequency needs at least one episode")
    fs, ws = [], []
    for e in episodes:
        f, w = episode_frequency(e)
        if f is not None:
            fs.append(f)
            ws.append(w)
    if not fs:
        raise NoRewardError("no episode contains a reward")
    fs, ws = np.array(fs), np.array(ws)
    return float(np.sqrt(np.sum(ws * fs ** 2) / np.sum(ws)))


def gamma_from_frequency(f, c_gamma: float = 10.0) -> float:
    """gamma = clip(1 - f/c_gamma, 0.99, 0.9998); NO_REWARD gives 0.9998."""
    if f is NO_REWARD or f is None:
        return GAMMA_MAX
    if not c_gamma > 0:
        raise ValueError("c_gamma must be positive")
    if not f > 0:
        raise ValueError(f"frequency must be positive, got {f}")
    return float(min(max(1.0 - f / c_gamma, GAMMA_MIN), GAMMA_MAX))


def discounted_returns(r, gamma) -> np.ndarray:
    """Q_i = sum_{t >= i} gamma^(t-i) r_t."""
    r = np.asarray(r, dtype=float)
    out = np.empty_like(r)
    acc = 0.0
    for i in range(len(r) - 1, -1, -1):
        acc = r[i] + gamma * acc
        out[i] = acc
    return out


def _geom(g, n):
    """(1 - g^n)/(1 - g), equal to n at g = 1."""
    return float(n) if g == 1.0 else (1.0 - g ** n) / (1.0 - g)


SIGMA_FLOOR = 1e-6


def estimate_normalization(episodes, gamma: float, f: float):
    """(mu, sigma, mu_r, sigma_r) from complete episodes with nonzero return.

    sigma_r is the population standard deviation of the rescaled deviations of
    the initial returns. sigma predicts the spread of the initial return under
    gamma_0 = 1 - f/2. When sigma_r vanishes sigma falls back to 1; otherwise
    it is floored at SIGMA_FLOOR.
    """
    eps = [e for e in episodes if not getattr(e, "truncated", False)]
    eps = [_rewards(e) for e in eps]
    eps = [r for r in eps if r.sum() != 0.0]
    if not eps:
        raise NoRewardError("no complete episode with nonzero return")
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    q_all = [discounted_returns(r, gamma) for r in eps]
    mu = float(np.mean(np.concatenate(q_all)))
    q0 = np.array([q[0] for q in q_all])
    t = np.array([len(r) for r in eps])
    horizon = np.array([_geom(gamma, n) for n in t])
    mu_r = float(np.mean(q0 / horizon))
    dev = (q0 - horizon * mu_r) / np.sqrt(np.array([_geom(gamma * gamma, n) for n in t]))
    sigma_r = float(np.std(dev))
    g0 = 1.0 - f / 2.0
    spread = float(np.mean(np.sqrt([_geom(g0 * g0, n) for n in t])))
    scale = max(float(np.max(np.abs(dev))), abs(mu_r), 1.0)
    if sigma_r <= 1e-12 * scale:
        sigma = 1.0
    else:
        sigma = max(sigma_r * spread, SIGMA_FLOOR)
    return mu, sigma, mu_r, sigma_r


def normalize_reward(r, terminal: bool, gamma: float, mu: float, sigma: float) -> float:
    """(r - (1-gamma) mu)/sigma; a terminal step adds -gamma mu/sigma, giving (r - mu)/sigma."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if terminal:
        return (r - mu) / sigma
    return (r - (1.0 - gamma) * mu) / sigma


@dataclass(frozen=True)
class GammaReport:
    f: float | None
    gamma: float
    mu_r: float
    sigma_r: float
    mu: float
    sigma: float
    c_gamma: float

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("f", "gamma", "mu_r", "sigma_r", "mu", "sigma", "c_gamma")}


def gamma_report(episodes, c_gamma: float = 10.0) -> GammaReport:
    """Frequency, discount and normalization constants; identity normalization if nothing is rewarded."""
    complete = [e for e in episodes if not getattr(e, "truncated", False)]
    try:
        f = estimate_frequency(complete)
    except NoRewardError:
        return GammaReport(None, GAMMA_MAX, 0.0, 0.0, 0.0, 1.0, c_gamma)
    gamma = gamma_from_frequency(f, c_gamma)
    mu, sigma, mu_r, sigma_r = estimate_normalization(complete, gamma, f)
    return GammaReport(f, gamma, mu_r, sigma_r, mu, sigma, c_gamma)


@dataclass(frozen=True)
class EpsilonSchedule:
    """1 during warmup, exponential decay to 0.1, linear to 0.01, then constant.

    ``scale`` multiplies every breakpoint so short runs keep the same shape.
    """

    warmup: float = 5e4
    decay_end: float = 1e6
    linear_end: float = 4e7
    eps_mid: float = 0.1
    eps_final: float = 0.01
    scale: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if not 0 <= self.warmup < self.decay_end < self.linear_end:
            raise ValueError("breakpoints must satisfy 0 <= warmup < decay_end < linear_end")
        if not 0 < self.eps_final <= self.eps_mid <= 1:
            raise ValueError("need 0 < eps_final <= eps_mid <= 1")

    def at(self, j) -> float:
        if j < 0:
            raise ValueError("step must be >= 0")
        w, d, l = self.warmup * self.scale, self.decay_end * self.scale, self.linear_end * self.scale
        if j <= w:
            return 1.0
        if j <= d:
            return math.exp(j * math.log(self.eps_mid) / d)
        if j <= l:
            return self.eps_mid + (self.eps_final - self.eps_mid) * (j - d) / (l - d)
        return self.eps_final


def epsilon_at(j, scale: float = 1.0) -> float:
    return EpsilonSchedule(scale=scale).at(j)
