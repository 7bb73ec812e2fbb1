"""Experiment protocols. Each returns a Result of CSV tables, summary lines and checks."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import spectral as sp
from ..approx import semi_gradient_step
from ..losses import LossSpec
from ..mdp import Transition, build_cliff_walking, build_one_way_cliff, random_mdp, rollout, value_iteration
from ..tabular import LearnerConfig, Rule, log_grid, run_online, run_random_sampling
from .config import ExperimentConfig
from .convergence import (LinearProblem, build_divergence_instance, divergence_problem, outer_iteration,
                          run_cdqn_convergence_check)
from .training import TrainSettings, train


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class Result:
    tables: dict = field(default_factory=dict)   # metric -> (header, rows)
    summary: list = field(default_factory=list)  # text lines
    checks: list = field(default_factory=list)
    info: dict = field(default_factory=dict)

    def check(self, name, passed, detail=""):
        self.checks.append(Check(name, bool(passed), detail))

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)


def run_seed(cfg: ExperimentConfig, i: int) -> np.random.SeedSequence:
    """Independent stream for run ``i`` under the master seed."""
    return np.random.SeedSequence(cfg["experiment.master_seed"], spawn_key=(i,))


def mean_se(x):
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return float("nan"), float("nan")
    se = float(np.std(x, ddof=1) / np.sqrt(x.size)) if x.size > 1 else float("nan")
    return float(np.mean(x)), se


def fmt_mean_se(x) -> str:
    m, s = mean_se(x)
    return f"{m:.6g} +- {s:.3g}" if np.isfinite(s) else f"{m:.6g}"


# ---------------------------------------------------------- random sampling

def _settings(cfg):
    gammas = cfg["learner.gammas"]
    widths = cfg["env.widths"]
    if len(widths) == 1:
        widths = widths * len(gammas)
    return list(zip(widths, gammas))


def random_sampling_hits(cfg: ExperimentConfig, res: Result | None = None) -> dict:
    """First-hit counts keyed by (width, gamma, rule); fills CSV tables when ``res`` is given."""
    hits = {}
    curves = {"msbe": [], "q_distance": [], "return": []}
    hit_rows = []
    for w, g in _settings(cfg):
        mdp = build_cliff_walking(w, cfg["env.height"])
        q_star = value_iteration(mdp, g)
        pts = log_grid(cfg["budget.updates"], cfg["budget.per_decade"])
        for rule in cfg["learner.rules"]:
            lc = LearnerConfig(Rule(rule), cfg["learner.alpha"], g)
            out = []
            for i in range(cfg.n_runs):
                c = run_random_sampling(mdp, lc, cfg["budget.updates"], pts, run_seed(cfg, i), q_star,
                                        cfg["budget.threshold"])
                out.append(c.first_hit)
                hit_rows.append([w, g, rule, i, "" if c.first_hit is None else c.first_hit])
                for name, arr in (("msbe", c.msbe), ("q_distance", c.q_distance), ("return", c.greedy_return)):
                    curves[name].extend([w, g, rule, i, int(u), float(v)] for u, v in zip(c.updates, arr))
            hits[(w, g, rule)] = out
    if res is not None:
        head = ["width", "gamma", "rule", "seed", "updates", "value"]
        for name, rows in curves.items():
            res.tables[name] = (head, rows)
        res.tables["first_hit"] = (["width", "gamma", "rule", "seed", "first_hit"], hit_rows)
        for (w, g, rule), h in hits.items():
            got = [x for x in h if x is not None]
            res.summary.append(f"width={w} gamma={g} {rule}: reached {len(got)}/{len(h)}, "
                               f"updates to threshold {fmt_mean_se(got) if got else 'n/a'}")
    return hits


def _mean_hit(h):
    return float("inf") if any(x is None for x in h) else float(np.mean(h))


def fig1(cfg: ExperimentConfig) -> Result:
    res = Result()
    hits = random_sampling_hits(cfg, res)
    sets = _settings(cfg)
    rules = cfg["learner.rules"]
    if "qtable" in rules and "rg" in rules:
        w, g = sets[0]
        q, r = _mean_hit(hits[(w, g, "qtable")]), _mean_hit(hits[(w, g, "rg")])
        res.check(f"qtable reaches threshold in fewer updates than rg (width {w}, gamma {g})",
                  np.isfinite(q) and q < r, f"{q:.6g} vs {r:.6g}")
    if len(sets) == 2:
        bands = {"qtable": (2.0, 8.0), "rg": (4.0, 16.0)}
        for rule in rules:
            a, b = _mean_hit(hits[(*sets[1], rule)]), _mean_hit(hits[(*sets[0], rule)])
            ratio = a / b
            res.summary.append(f"{rule}: steps ratio {sets[1]} / {sets[0]} = {ratio:.4g}")
            if rule in bands:
                lo, hi = bands[rule]
                res.check(f"{rule} steps ratio within [{lo:g}, {hi:g}]", lo <= ratio <= hi, f"{ratio:.4g}")
    return res


def fig2(cfg: ExperimentConfig) -> Result:
    res = Result()
    hits = random_sampling_hits(cfg, res)
    sets = _settings(cfg)
    rules = cfg["learner.rules"]
    if "rg" in rules:
        disc = [(w, g) for w, g in sets if g < 1.0]
        hs = [_mean_hit(hits[(w, g, "rg")]) for w, g in disc]
        if len(disc) >= 3 and all(np.isfinite(hs)):
            slope = sp.scaling_exponent([1.0 / (1.0 - g) for _, g in disc], hs)
            res.summary.append(f"rg log-log slope of updates vs 1/(1-gamma): {slope:.4f}")
            res.check("rg updates grow like 1/(1-gamma) (slope in [0.7, 1.3])", 0.7 <= slope <= 1.3, f"{slope:.4f}")
        elif len(disc) >= 3:
            res.check("rg reaches threshold for every gamma < 1", False, "some runs did not reach it")
        for w, g in sets:
            if g == 1.0:
                h = hits[(w, g, "rg")]
                res.check("rg at gamma = 1 does not reach threshold within budget", all(x is None for x in h),
                          f"{sum(x is not None for x in h)}/{len(h)} reached")
    if "qtable" in rules:
        got = {g: sum(x is not None for x in hits[(w, g, "qtable")]) for w, g in sets}
        ok = all(n == cfg.n_runs for n in got.values())
        res.check("qtable reaches threshold at every gamma", ok,
                  ", ".join(f"gamma {g:g}: {n}/{cfg.n_runs}" for g, n in got.items()))
    return res


# ------------------------------------------------------------------ online

def fig3(cfg: ExperimentConfig) -> Result:
    res = Result()
    mdp = build_one_way_cliff(cfg["env.length"])
    g = cfg["learner.gammas"][0]
    best = rollout(mdp, value_iteration(mdp, g), 0.0, 0)[1]
    curve_rows, final_rows = [], []
    finals = {}
    for rule in cfg["learner.rules"]:
        lc = LearnerConfig(Rule(rule), cfg["learner.alpha"], g)
        for eps in cfg["explore.epsilons"]:
            fs = []
            for i in range(cfg.n_runs):
                c = run_online(mdp, lc, eps, cfg["budget.episodes"], run_seed(cfg, i), cfg["budget.eval_every"])
                fs.append(c.final_return)
                curve_rows.extend([rule, eps, i, int(e), float(v)] for e, v in zip(c.episodes, c.greedy_return))
                final_rows.append([rule, eps, i, c.final_return, int(c.final_return == best)])
            finals[(rule, eps)] = np.array(fs)
            n_opt = int(np.sum(np.array(fs) == best))
            res.summary.append(f"{rule} eps={eps:g}: final greedy return {fmt_mean_se(fs)}, "
                               f"optimal in {n_opt}/{len(fs)}")
    res.tables["return"] = (["rule", "epsilon", "seed", "episode", "greedy_return"], curve_rows)
    res.tables["final"] = (["rule", "epsilon", "seed", "final_return", "optimal"], final_rows)
    res.info["optimal_return"] = best
    n = cfg.n_runs
    if ("qtable", 0.0) in finals:
        k = int(np.sum(finals[("qtable", 0.0)] == best))
        res.check("qtable eps=0 optimal in >= 95% of runs", k >= 0.95 * n, f"{k}/{n}")
    if ("rg", 0.0) in finals:
        k = int(np.sum(finals[("rg", 0.0)] == best))
        res.check("rg eps=0 optimal in <= 5% of runs", k <= 0.05 * n, f"{k}/{n}")
    if "rg" in cfg["learner.rules"] and len(cfg["explore.epsilons"]) > 1:
        eps = sorted(cfg["explore.epsilons"])
        means = [float(np.mean(finals[("rg", e)])) for e in eps]
        res.check("rg mean final return non-decreasing in epsilon", all(np.diff(means) >= 0),
                  ", ".join(f"{m:.4g}" for m in means))
    return res


# ---------------------------------------------------------------- spectral

def spectral(cfg: ExperimentConfig) -> Result:
    res = Result()
    kind = sp.Kind(cfg["spectral.kind"])
    g = cfg["spectral.gamma"] if kind is sp.Kind.CYCLE else None
    rows = []
    worst_eig = worst_kappa = 0.0
    ns, kappas = [], []
    for n in cfg["spectral.ns"]:
        m = sp.trajectory_hessian(n) if kind is sp.Kind.TRAJECTORY else sp.cycle_hessian(n, g)
        num = sp.numeric_eigs(m, method=cfg["spectral.method"])
        ana = sp.analytic_eigs(kind, n, g)
        err = float(np.max(np.abs(num - ana) / np.abs(ana)))
        k_num = sp.condition_number(num)
        k_ref = sp.trajectory_kappa_exact(n) if kind is sp.Kind.TRAJECTORY else sp.condition_number(ana)
        k_err = abs(k_num - k_ref) / k_ref
        worst_eig, worst_kappa = max(worst_eig, err), max(worst_kappa, k_err)
        rows.append([n, k_num, k_ref, err, k_err])
        ns.append(n)
        kappas.append(k_num)
    res.tables["spectral"] = (["n", "kappa_numeric", "kappa_analytic", "max_rel_eig_error", "kappa_rel_error"], rows)
    res.summary.append(f"{kind.value}: worst eigenvalue relative error {worst_eig:.3e}, kappa {worst_kappa:.3e}")
    res.check("eigenvalues match the closed form to 1e-9 relative", worst_eig <= 1e-9, f"{worst_eig:.3e}")
    res.check("kappa matches the closed form to 1e-9 relative", worst_kappa <= 1e-9, f"{worst_kappa:.3e}")
    if kind is sp.Kind.TRAJECTORY:
        big = [(n, k) for n, k in zip(ns, kappas) if n >= 8]
        if len(big) >= 3:
            slope = sp.scaling_exponent(*zip(*big))
            res.summary.append(f"log-log slope of kappa vs N (N >= 8): {slope:.4f}")
            res.check("kappa grows like N^2 (slope in [1.9, 2.1])", 1.9 <= slope <= 2.1, f"{slope:.4f}")
    else:
        lim = sp.cycle_kappa_limit(g)
        rel = abs(kappas[-1] - lim) / lim
        res.summary.append(f"kappa at N={ns[-1]}: {kappas[-1]:.6g}, large-N limit {lim:.6g}")
        res.check("cycle kappa within 5% of the large-N limit", rel <= 0.05, f"{rel:.3e}")
    return res


# -------------------------------------------------------------- divergence

def semi_gradient_trace(gamma, alpha, w0, steps, bound):
    """w after each semi-gradient step on the frozen s1 -> s2 transition; stops past ``bound``."""
    mdp, model, feats = build_divergence_instance()
    model = model.with_params([w0])
    t = Transition(0, 0, 0.0, 1, False)
    ws = [float(w0)]
    for _ in range(steps):
        model.params = semi_gradient_step(model, t, gamma, alpha, feats)
        ws.append(float(model.params[0]))
        if abs(ws[-1]) > bound:
            break
    return np.array(ws)


def divergence(cfg: ExperimentConfig) -> Result:
    res = Result()
    g, a, w0 = cfg["divergence.gamma"], cfg["divergence.alpha"], cfg["divergence.w0"]
    ws = semi_gradient_trace(g, a, w0, cfg["divergence.steps"], cfg["divergence.bound"])
    res.tables["semi_gradient"] = (["step", "w"], [[i, w] for i, w in enumerate(ws)])
    exceeded = abs(ws[-1]) > cfg["divergence.bound"]
    res.summary.append(f"semi-gradient: |w| = {abs(ws[-1]):.4g} after {len(ws) - 1} steps "
                       f"(per-step factor {1 + a * (2 * g - 1):.6g})")
    res.check(f"semi-gradient |w| exceeds {cfg['divergence.bound']:g} within {cfg['divergence.steps']} steps",
              exceeded, f"{len(ws) - 1} steps")
    prob = divergence_problem(g)
    rows = []
    for kind in ("cdqn", "dqn"):
        run = outer_iteration(prob, kind, cfg["divergence.n_outer"], theta0=[w0])
        for i, (loss, msbe) in enumerate(zip(run.chain, run.msbe)):
            rows.append([kind, i + 1, float(run.thetas[i + 1][0]), loss, msbe])
        w_end = float(run.thetas[-1][0])
        res.summary.append(f"{kind} outer iteration: w = {w_end:.6g} after {cfg['divergence.n_outer']} steps, "
                           f"final loss {run.chain[-1]:.6g}, msbe {run.msbe[-1]:.6g}")
        if kind == "cdqn":
            res.check("cdqn outer losses non-increasing", run.non_increasing, f"max increase {run.max_increase:.3e}")
            res.check(f"cdqn |w| <= {cfg['divergence.w_tol']:g} at termination",
                      abs(w_end) <= cfg["divergence.w_tol"], f"|w| = {abs(w_end):.6g}")
        else:
            res.info["dqn_msbe_increasing"] = bool(np.all(np.diff(run.msbe) > 0))
    res.tables["outer"] = (["kind", "outer", "w", "loss", "msbe"], rows)
    return res


# ------------------------------------------------------------- convergence

def convergence_problems(cfg: ExperimentConfig):
    rng = np.random.default_rng(run_seed(cfg, 0))
    mdps = [random_mdp(rng, n_states=(3, cfg["env.max_states"])) for _ in range(cfg["convergence.instances"])]
    return [LinearProblem.tabular(m, cfg["convergence.gamma"]) for m in mdps]


def convergence(cfg: ExperimentConfig) -> Result:
    res = Result()
    probs = convergence_problems(cfg)
    rows = []
    variants = [(k, False) for k in cfg["convergence.kinds"]]
    if cfg["convergence.relaxed"]:
        variants.append(("cdqn", True))
    for kind, relaxed in variants:
        rep = run_cdqn_convergence_check(probs, kind, cfg["convergence.n_outer"], cfg["convergence.tol_inner"],
                                         cfg["convergence.slack"], relaxed=relaxed)
        label = kind + ("_relaxed" if relaxed else "")
        for j, run in enumerate(rep.runs):
            for i, (loss, msbe, st) in enumerate(zip(run.chain, run.msbe, run.stationarity)):
                rows.append([label, j, i + 1, loss, msbe, st])
        n_mono = sum(r.non_increasing for r in rep.runs)
        res.summary.append(f"{label}: chain non-increasing in {n_mono}/{rep.n_total}, "
                           f"worst inner stationarity {rep.max_stationarity:.3e}")
        if kind == "cdqn":
            res.check(f"{label} outer losses non-increasing within slack in every instance",
                      rep.passed, f"{rep.n_pass}/{rep.n_total}")
    res.tables["chains"] = (["variant", "instance", "outer", "loss", "msbe", "stationarity"], rows)
    return res


# ---------------------------------------------------------------- training

def train_settings(cfg: ExperimentConfig, kind: str, **over) -> TrainSettings:
    kw = dict(loss=LossSpec(kind, cfg["train.shape"], cfg["train.double_q"], cfg["train.eps_t"]),
              hidden=tuple(cfg["train.hidden"]), lr=cfg["train.lr"], eps_a=cfg["train.eps_a"],
              clip_norm=cfg["train.clip_norm"], batch_size=cfg["train.batch_size"],
              capacity=cfg["replay.capacity"], strategy=cfg["replay.strategy"],
              discard_prob=cfg["replay.discard_prob"], prioritized=cfg["replay.prioritized"],
              alpha_p=cfg["replay.alpha_p"], c_p=cfg["replay.c_p"], target_period=cfg["train.target_period"],
              total_steps=cfg["train.steps"], learning_starts=cfg["train.learning_starts"],
              gamma=cfg["train.gamma"], c_gamma=cfg["train.c_gamma"], normalize=cfg["train.normalize"],
              max_episode_steps=cfg["train.max_episode_steps"], eval_every=cfg["train.eval_every"],
              log_every=cfg["train.log_every"])
    kw.update(over)
    return TrainSettings(**kw)


def _train_env(cfg):
    if cfg["env.kind"] == "one_way_cliff":
        return build_one_way_cliff(cfg["env.length"])
    if cfg["env.kind"] == "random":
        return random_mdp(np.random.default_rng(run_seed(cfg, 10**6)), n_states=(3, cfg["env.max_states"]))
    return build_cliff_walking(cfg["env.widths"][0], cfg["env.height"])


def _train_variants(cfg, variants, res: Result):
    mdp = _train_env(cfg)
    g_eval = cfg["train.gamma"] if cfg["train.gamma"] is not None else 0.99
    best = rollout(mdp, value_iteration(mdp, g_eval), 0.0, 0, cfg["train.max_episode_steps"])[1]
    loss_rows, ret_rows = [], []
    curves = {}
    for kind in cfg["train.kinds"]:
        for label, over in variants:
            cs = [train(mdp, train_settings(cfg, kind, **over), run_seed(cfg, i)) for i in range(cfg.n_runs)]
            curves[(kind, label)] = cs
            for i, c in enumerate(cs):
                loss_rows.extend([kind, label, i, int(s), float(v)] for s, v in zip(c.steps, c.loss))
                ret_rows.extend([kind, label, i, int(s), float(v)] for s, v in zip(c.eval_steps, c.greedy_return))
            fin = [c.greedy_return[-1] for c in cs]
            res.summary.append(f"{kind} {label}: final greedy return {fmt_mean_se(fin)} (optimum {best:g}), "
                               f"max logged loss {max((c.loss.max() for c in cs if c.loss.size), default=0):.4g}")
            res.info.setdefault("gamma_reports", {})[f"{kind}/{label}"] = [c.report for c in cs]
    res.tables["loss"] = (["kind", "variant", "seed", "step", "loss"], loss_rows)
    res.tables["return"] = (["kind", "variant", "seed", "step", "greedy_return"], ret_rows)
    res.info["optimal_return"] = best
    return curves


def loss_blowup(loss, fraction=0.1):
    """max(loss) / max(loss over the first ``fraction`` of the logged points)."""
    loss = np.asarray(loss, dtype=float)
    if loss.size == 0:
        return 0.0
    k = max(1, int(np.ceil(fraction * loss.size)))
    head = loss[:k].max()
    return float(loss.max() / head) if head > 0 else (0.0 if loss.max() == 0 else float("inf"))


def train_experiment(cfg: ExperimentConfig) -> Result:
    res = Result()
    _train_variants(cfg, [("default", {})], res)
    return res


def incomplete(cfg: ExperimentConfig) -> Result:
    res = Result()
    cap = cfg["replay.capacity"]
    small = max(1, int(round(cap * cfg["incomplete.capacity_fraction"])))
    variants = [
        ("complete", {"discard_prob": 0.0}),
        ("discard", {"discard_prob": cfg["incomplete.discard_prob"]}),
        ("random_replace", {"discard_prob": 0.0, "strategy": "random_replace", "capacity": small}),
    ]
    curves = _train_variants(cfg, variants, res)
    fac = cfg["incomplete.blowup_factor"]
    if "cdqn" in cfg["train.kinds"]:
        for label in ("discard", "random_replace"):
            worst = max(loss_blowup(c.loss) for c in curves[("cdqn", label)])
            res.check(f"cdqn {label}: loss stays within {fac:g}x its initial maximum", worst <= fac,
                      f"worst ratio {worst:.4g}")
    return res


EXPERIMENTS = {"fig1": fig1, "fig2": fig2, "fig3": fig3, "spectral": spectral, "divergence": divergence,
               "convergence": convergence, "incomplete": incomplete, "train": train_experiment}


def run_experiment(cfg: ExperimentConfig) -> Result:
    return EXPERIMENTS[cfg.name](cfg)
