"""Tabular learners: Q-table learning and residual-gradient (RG) descent on the MSBE.

Also holds the MSBE and distance-to-Q* metrics and the two tabular
protocols: uniform random sampling of state-action pairs, and online
epsilon-greedy interaction.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .mdp import MdpSpec, QTable, Transition, bellman_backup, greedy_action, rollout, value_iteration


class Rule(enum.Enum):
    QTABLE = "qtable"
    RG = "rg"
    RG_TIE_SPLIT = "rg_tie_split"


_KERNEL_RULE = {Rule.QTABLE: _kernels.QTABLE, Rule.RG: _kernels.RG, Rule.RG_TIE_SPLIT: _kernels.RG_TIE_SPLIT}


@dataclass(frozen=True)
class LearnerConfig:
    rule: Rule
    alpha: float
    gamma: float

    def __post_init__(self):
        object.__setattr__(self, "rule", Rule(self.rule))
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")


def _successor_max(q: QTable, t: Transition):
    """(max value, tied pair ids); (0, []) for a terminal successor."""
    if t.terminal:
        return 0.0, []
    mdp = q.mdp
    lo, hi = mdp.offsets[t.s_next], mdp.offsets[t.s_next + 1]
    row = q.values[lo:hi]
    m = float(row.max())
    return m, [int(lo + i) for i in np.flatnonzero(row == m)]


def td_error(q: QTable, t: Transition, gamma: float) -> float:
    m, _ = _successor_max(q, t)
    return t.r + gamma * m - q.values[q.mdp.pair(t.s, t.a)]


def q_table_update(q: QTable, t: Transition, cfg: LearnerConfig) -> float:
    """dQ(s,a) = alpha (r + gamma max Q(s',.) - Q(s,a)). Returns the applied delta."""
    k = q.mdp.pair(t.s, t.a)
    m, _ = _successor_max(q, t)
    d = cfg.alpha * (t.r + cfg.gamma * m - q.values[k])
    q.values[k] += d
    return d


def rg_update(q: QTable, t: Transition, cfg: LearnerConfig) -> dict:
    """Gradient step on (Q(s,a) - r - gamma max Q(s',.))^2 with step alpha/2.

    Q(s,a) moves by alpha*delta and the maximizing successor entry by
    -gamma*alpha*delta. Plain RG picks the lowest-index maximizer; the
    tie-split rule spreads the second delta evenly over all tied maximizers.
    Returns {pair id: applied delta}.
    """
    k = q.mdp.pair(t.s, t.a)
    m, ties = _successor_max(q, t)
    delta = t.r + cfg.gamma * m - q.values[k]
    if cfg.rule is Rule.QTABLE:
        ties = []
    elif cfg.rule is Rule.RG:
        ties = ties[:1]
    out = {k: cfg.alpha * delta}
    q.values[k] += cfg.alpha * delta
    if ties:
        share = cfg.gamma * cfg.alpha * delta / len(ties)
        for c in ties:
            out[c] = out.get(c, 0.0) - share
            q.values[c] -= share
    return out


def apply_rule(q: QTable, t: Transition, cfg: LearnerConfig):
    if cfg.rule is Rule.QTABLE:
        return q_table_update(q, t, cfg)
    return rg_update(q, t, cfg)


def msbe(q: QTable, dataset, gamma: float) -> float:
    """Mean of squared Bellman residuals over ``dataset``."""
    dataset = list(dataset)
    if not dataset:
        raise ValueError("msbe needs a non-empty dataset")
    return float(np.mean([td_error(q, t, gamma) ** 2 for t in dataset]))


def msbe_all_pairs(q: QTable, gamma: float) -> float:
    """MSBE over every legal pair, vectorized."""
    return float(np.mean((bellman_backup(q.mdp, q.values, gamma) - q.values) ** 2))


def q_distance(q: QTable, q_star: QTable) -> float:
    """Sum over pairs of (Q - Q*)^2."""
    if q.mdp is not q_star.mdp and (
            q.mdp.n_pairs != q_star.mdp.n_pairs
            or not np.array_equal(q.mdp.pair_state, q_star.mdp.pair_state)
            or not np.array_equal(q.mdp.pair_action, q_star.mdp.pair_action)):
        raise ValueError("Q tables are indexed by different state-action sets")
    return float(np.sum((q.values - q_star.values) ** 2))


def log_grid(n_updates: int, per_decade: int = 30) -> np.ndarray:
    """0, n_updates and log-spaced integer points in between."""
    if n_updates <= 0:
        return np.array([0], dtype=np.int64)
    top = np.log10(n_updates)
    pts = np.unique(np.round(10 ** np.arange(0, top, 1 / per_decade)).astype(np.int64))
    return np.unique(np.concatenate([[0], pts[pts < n_updates], [n_updates]]))


def kernel_arrays(mdp: MdpSpec):
    nterm = mdp.terminal[mdp.next_state].copy()
    nlo, nhi = mdp.next_pair_ranges()
    return (np.ascontiguousarray(mdp.rewards, dtype=float), nterm,
            np.ascontiguousarray(nlo, dtype=np.int64), np.ascontiguousarray(nhi, dtype=np.int64))


@dataclass
class SamplingCurves:
    updates: np.ndarray
    msbe: np.ndarray
    q_distance: np.ndarray
    greedy_return: np.ndarray
    first_hit: int | None
    q: QTable


def greedy_return(mdp: MdpSpec, q: QTable, rng, max_steps=None) -> float:
    return rollout(mdp, q, 0.0, rng, max_steps)[1]


def run_random_sampling(mdp: MdpSpec, cfg: LearnerConfig, n_updates: int, eval_points=None, seed=0,
                        q_star: QTable | None = None, threshold: float | None = None,
                        chunk: int = 1 << 20, evaluate_returns: bool = True) -> SamplingCurves:
    """Uniform random sampling of legal pairs, one update per sample, from Q = 0.

    ``first_hit`` is the exact number of updates after which |Q - Q*|^2 first
    drops to ``threshold`` (None if never, or if no threshold was given).
    Metrics are logged at ``eval_points`` (default: 30 log-spaced points per
    decade). Greedy returns use a fresh evaluation stream per point.
    """
    if n_updates < 0:
        raise ValueError("n_updates must be >= 0")
    if q_star is None:
        q_star = value_iteration(mdp, cfg.gamma)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    s_sample, s_eval = ss.spawn(2)
    rng = np.random.default_rng(s_sample)
    eval_rng = np.random.default_rng(s_eval)
    pts = log_grid(n_updates) if eval_points is None else np.unique(np.asarray(eval_points, dtype=np.int64))
    if len(pts) and (pts[0] < 0 or pts[-1] > n_updates):
        raise ValueError("eval_points must lie in [0, n_updates]")
    q = QTable(mdp)
    r, nterm, nlo, nhi = kernel_arrays(mdp)
    rule = _KERNEL_RULE[cfg.rule]
    thr = -1.0 if threshold is None else float(threshold)
    max_a = max(len(a) for a in mdp.legal)
    first_hit = 0 if threshold is not None and q_distance(q, q_star) <= threshold else None
    rec = {"msbe": [], "q_distance": [], "greedy_return": []}

    def record():
        rec["msbe"].append(msbe_all_pairs(q, cfg.gamma))
        rec["q_distance"].append(q_distance(q, q_star))
        rec["greedy_return"].append(greedy_return(mdp, q, eval_rng) if evaluate_returns else np.nan)

    stops = list(pts)
    while stops and stops[0] == 0:
        record()
        stops.pop(0)
    targets = sorted(set(stops) | ({n_updates} if n_updates else set()))
    pts_set = set(int(p) for p in pts)
    # samples come in fixed-size blocks so the stream does not depend on eval_points
    block = np.empty(0, dtype=np.int64)
    pos = 0
    done = 0
    for stop in targets:
        while done < stop:
            if pos == len(block):
                block, pos = rng.integers(0, mdp.n_pairs, size=chunk), 0
            m = min(len(block) - pos, stop - done)
            samples = block[pos:pos + m]
            hit = _kernels.run_updates(q.values, q_star.values, samples, r, nterm, nlo, nhi,
                                       float(cfg.gamma), float(cfg.alpha), rule,
                                       thr if first_hit is None else -1.0, max_a)
            if hit >= 0 and first_hit is None:
                first_hit = done + hit + 1
                # finish the slice past the hit without tracking
                _kernels.run_updates(q.values, q_star.values, samples[hit + 1:], r, nterm, nlo, nhi,
                                     float(cfg.gamma), float(cfg.alpha), rule, -1.0, max_a)
            done += m
            pos += m
        if stop in pts_set:
            record()
    return SamplingCurves(pts, np.array(rec["msbe"]), np.array(rec["q_distance"]),
                          np.array(rec["greedy_return"]), first_hit, q)


def run_random_sampling_reference(mdp: MdpSpec, cfg: LearnerConfig, n_updates: int, seed=0, q_star=None,
                                  threshold=None, chunk: int = 1 << 20):
    """Pure-Python route for the same sample stream. Returns (Q, first_hit)."""
    if q_star is None:
        q_star = value_iteration(mdp, cfg.gamma)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    rng = np.random.default_rng(ss.spawn(2)[0])
    q = QTable(mdp)
    trans = mdp.transitions()
    first_hit = 0 if threshold is not None and q_distance(q, q_star) <= threshold else None
    done = 0
    while done < n_updates:
        m = min(chunk, n_updates - done)
        for i, k in enumerate(rng.integers(0, mdp.n_pairs, size=m)):
            apply_rule(q, trans[k], cfg)
            if first_hit is None and threshold is not None and q_distance(q, q_star) <= threshold:
                first_hit = done + i + 1
        done += m
    return q, first_hit


@dataclass
class OnlineCurve:
    episodes: np.ndarray
    greedy_return: np.ndarray
    train_return: np.ndarray
    q: QTable

    @property
    def final_return(self) -> float:
        return float(self.greedy_return[-1])


def run_online(mdp: MdpSpec, cfg: LearnerConfig, epsilon: float, n_episodes: int, seed=0,
               eval_every: int = 1, max_steps: int | None = None) -> OnlineCurve:
    """Epsilon-greedy interaction from Q = 0, updating on every observed transition.

    The greedy policy (epsilon = 0, random tie-breaking) is evaluated before
    training and after every ``eval_every`` episodes, always including the last.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if n_episodes < 0 or eval_every < 1:
        raise ValueError("n_episodes must be >= 0 and eval_every >= 1")
    if max_steps is None:
        max_steps = 10 * mdp.n_states
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    s_act, s_eval = ss.spawn(2)
    rng = np.random.default_rng(s_act)
    eval_rng = np.random.default_rng(s_eval)
    q = QTable(mdp)
    eps_idx, rets, train = [0], [greedy_return(mdp, q, eval_rng, max_steps)], []
    for e in range(1, n_episodes + 1):
        s, total = mdp.start_state, 0.0
        for _ in range(max_steps):
            if mdp.terminal[s]:
                break
            acts = mdp.legal[s]
            if epsilon > 0 and rng.random() < epsilon:
                a = acts[rng.integers(len(acts))]
            else:
                a = greedy_action(q, s, rng)
            t = mdp.transition(s, a)
            apply_rule(q, t, cfg)
            total += t.r
            s = t.s_next
        train.append(total)
        if e % eval_every == 0 or e == n_episodes:
            eps_idx.append(e)
            rets.append(greedy_return(mdp, q, eval_rng, max_steps))
    return OnlineCurve(np.array(eps_idx), np.array(rets), np.array(train), q)
