"""Desk-scale DQN / C-DQN / NFQ training on small MDPs with one-hot state features."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..approx import OptimizerState, forward, init_model, one_hot_features, optimizer_step
from ..losses import Batch, LossKind, LossSpec, TargetTracker, batch_loss_and_grad
from ..mdp import Episode, MdpSpec, QTable, Transition, rollout
from ..replay import ReplayMemory, beta_at, sample_batch, sample_uniform, update_priorities
from ..schedule import EpsilonSchedule, estimate_normalization, gamma_report, normalize_reward


@dataclass
class TrainSettings:
    loss: LossSpec = field(default_factory=LossSpec)
    hidden: tuple = (32,)
    lr: float = 6.25e-5
    eps_a: float = 1.5e-4
    clip_norm: float | None = 10.0
    batch_size: int = 32
    capacity: int = 10000
    strategy: str = "fifo"
    discard_prob: float = 0.0
    prioritized: bool = True
    alpha_p: float = 0.6
    c_p: float = 10.0
    target_period: int = 100
    total_steps: int = 20000
    learning_starts: int = 500
    gamma: float | None = 0.9        # None: estimate from the warm-up episodes
    c_gamma: float = 10.0
    normalize: bool = False
    max_episode_steps: int = 100
    eval_every: int = 1000
    log_every: int = 100

    def __post_init__(self):
        if self.total_steps < 0 or self.learning_starts < 0:
            raise ValueError("step counts must be >= 0")
        if self.batch_size < 1 or self.target_period < 1 or self.eval_every < 1 or self.log_every < 1:
            raise ValueError("batch_size, target_period, eval_every and log_every must be >= 1")
        if self.gamma is not None and not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")


@dataclass
class TrainCurve:
    steps: np.ndarray            # env steps at which losses were logged
    loss: np.ndarray             # mean reported MSE over the log window
    eval_steps: np.ndarray
    greedy_return: np.ndarray
    episode_returns: np.ndarray
    gamma: float
    report: dict
    params: np.ndarray


def action_mask(mdp: MdpSpec, n_actions: int) -> np.ndarray:
    m = np.zeros((mdp.n_states, n_actions), dtype=bool)
    for s, acts in enumerate(mdp.legal):
        m[s, list(acts)] = True
    return m


def network_qtable(mdp: MdpSpec, model, features) -> QTable:
    out = forward(model, features)
    return QTable(mdp, out[mdp.pair_state, mdp.pair_action])


def train(mdp: MdpSpec, settings: TrainSettings, seed=0) -> TrainCurve:
    """Epsilon-greedy interaction with one optimizer step per env step after warm-up.

    The target network is the online parameters from one optimizer step
    before each periodic update. Rewards are optionally normalized with
    constants estimated from the warm-up episodes.
    """
    st = settings
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    s_env, s_init, s_mem, s_batch, s_eval = ss.spawn(5)
    env_rng, batch_rng, eval_rng = (np.random.default_rng(x) for x in (s_env, s_batch, s_eval))
    feats = one_hot_features(mdp.n_states)
    n_act = max(max(a) for a in mdp.legal if a) + 1
    mask = action_mask(mdp, n_act)
    model = init_model(mdp.n_states, st.hidden, n_act, np.random.default_rng(s_init))
    opt = OptimizerState(st.lr, st.eps_a, st.clip_norm)
    tracker = TargetTracker(model.params)
    mem = ReplayMemory(st.capacity, st.strategy, st.discard_prob, seed=s_mem, prioritized=st.prioritized,
                       **({"alpha_p": st.alpha_p, "c_p": st.c_p} if st.prioritized else {}))
    sched = EpsilonSchedule(scale=max(st.total_steps, 1) / 5e7)

    gamma = 0.9 if st.gamma is None else st.gamma
    mu, sigma = 0.0, 1.0
    report = {}
    warm_eps = []
    s, ep_rewards, ep_len = mdp.start_state, [], 0
    ep_returns, log_steps, log_loss, window = [], [], [], []
    eval_steps, eval_ret = [], []
    n_updates = 0

    def greedy_eval():
        q = network_qtable(mdp, model, feats)
        return rollout(mdp, q, 0.0, eval_rng, st.max_episode_steps)[1]

    def finish_episode(truncated):
        nonlocal s, ep_rewards, ep_len
        if ep_rewards:
            ep_returns.append(float(np.sum(ep_rewards)))
            if j < st.learning_starts:
                warm_eps.append(Episode(tuple(ep_rewards), truncated))
        mem.end_episode()
        s, ep_rewards, ep_len = mdp.start_state, [], 0

    eval_steps.append(0)
    eval_ret.append(greedy_eval())
    for j in range(st.total_steps):
        if j == st.learning_starts and (st.gamma is None or st.normalize):
            rep = gamma_report(warm_eps, st.c_gamma)
            report = rep.as_dict()
            if st.gamma is None:
                gamma = rep.gamma
            if st.normalize and rep.f is not None:
                # normalization constants are tied to the discount actually used
                mu, sigma, _, _ = estimate_normalization(
                    [e for e in warm_eps if not e.truncated], gamma, rep.f)
                report.update(mu=mu, sigma=sigma)
        eps = 1.0 if j < st.learning_starts else sched.at(j)
        acts = mdp.legal[s]
        if env_rng.random() < eps:
            a = acts[int(env_rng.integers(len(acts)))]
        else:
            qv = forward(model, feats[s])[list(acts)]
            best = np.flatnonzero(qv == qv.max())
            a = acts[int(best[0] if len(best) == 1 else best[env_rng.integers(len(best))])]
        t = mdp.transition(s, a)
        mem.push(t)
        ep_rewards.append(t.r)
        ep_len += 1
        s = t.s_next
        if t.terminal:
            finish_episode(False)
        elif ep_len >= st.max_episode_steps:
            finish_episode(True)

        if j >= st.learning_starts and len(mem) > 0:
            progress = (j - st.learning_starts) / max(st.total_steps - st.learning_starts, 1)
            if st.prioritized:
                items = sample_batch(mem.sampler, mem, st.batch_size, batch_rng, beta_at(min(progress, 1.0)))
            else:
                items = sample_uniform(mem, st.batch_size, batch_rng)
            ts = [it[1] for it in items]
            if st.normalize:
                ts = [Transition(x.s, x.a, normalize_reward(x.r, x.terminal, gamma, mu, sigma), x.s_next,
                                 x.terminal) for x in ts]
            batch = Batch.from_transitions(ts, feats, mask)
            w = np.array([it[2] for it in items]) if st.prioritized else None
            _, grad, terms = batch_loss_and_grad(batch, w, model, tracker.target.params, st.loss, gamma)
            tracker.before_step(model.params)
            model.params = optimizer_step(opt, model.params, grad)
            n_updates += 1
            if n_updates % st.target_period == 0:
                tracker.update()
            window.append(float(np.mean(terms.residual ** 2)))
            if st.prioritized:
                if st.loss.kind is LossKind.DQN:
                    mag = np.abs(terms.res_dqn)
                elif st.loss.kind is LossKind.MSBE:
                    mag = np.abs(terms.res_msbe)
                else:
                    mag = np.maximum(np.abs(terms.res_dqn), np.abs(terms.res_msbe))
                update_priorities(mem.sampler, mem, [(it[0], m) for it, m in zip(items, mag)])
        if window and (j + 1) % st.log_every == 0:
            log_steps.append(j + 1)
            log_loss.append(float(np.mean(window)))
            window = []
        if (j + 1) % st.eval_every == 0:
            eval_steps.append(j + 1)
            eval_ret.append(greedy_eval())
    return TrainCurve(np.array(log_steps, dtype=np.int64), np.array(log_loss), np.array(eval_steps, dtype=np.int64),
                      np.array(eval_ret), np.array(ep_returns), float(gamma), report, model.params.copy())
