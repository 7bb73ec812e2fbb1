"""One test per acceptance criterion, each at its stated tolerance.

Every test records a PASS/FAIL line (see the terminal summary) and then
asserts the same condition.
"""
import time

import numpy as np
import pytest

from cdqn_lab import spectral as sp
from cdqn_lab.approx import init_model, numeric_gradient
from cdqn_lab.harness.config import resolve
from cdqn_lab.harness.experiments import (convergence_problems, fig1, fig2, fig3, semi_gradient_trace)
from cdqn_lab.harness.convergence import divergence_problem, outer_iteration, run_cdqn_convergence_check
from cdqn_lab.losses import Batch, LossKind, LossSpec, Shape, batch_loss, batch_loss_and_grad, inverse_transform, \
    transform
from cdqn_lab.mdp import Transition
from cdqn_lab.replay import ReplayMemory, sample_batch, update_priorities
from cdqn_lab.schedule import GAMMA_MAX, GAMMA_MIN, NO_REWARD, estimate_frequency, gamma_from_frequency

from conftest import report

pytestmark = pytest.mark.acceptance


def _check(res, name_part):
    hits = [c for c in res.checks if name_part in c.name]
    assert len(hits) == 1, name_part
    return hits[0]


def test_spectral_exactness():
    t0 = time.perf_counter()
    worst_e = worst_k = 0.0
    for n in range(2, 513, 2):
        num = sp.numeric_eigs(sp.trajectory_hessian(n))
        k = np.arange(1, n + 1)
        ref = np.sort(4.0 - 4.0 * np.cos(k * np.pi / (n + 1)))
        worst_e = max(worst_e, float(np.max(np.abs(num - ref) / ref)))
        c = np.cos(np.pi / (n + 1))
        k_ref = (1 + c) / (1 - c)
        worst_k = max(worst_k, abs(sp.condition_number(num) - k_ref) / k_ref)
    dt = time.perf_counter() - t0
    ok = worst_e <= 1e-9 and worst_k <= 1e-9 and dt < 60
    report("spectral exactness (N = 2, 4, ..., 512)", ok,
           f"eig rel err {worst_e:.2e}, kappa rel err {worst_k:.2e}, {dt:.1f} s")
    assert ok


def test_kappa_scaling():
    pow2 = [2 ** j for j in range(3, 10)]
    even = list(range(8, 513, 2))
    slopes = []
    for ns in (pow2, even):
        ks = [sp.condition_number(sp.numeric_eigs(sp.trajectory_hessian(n))) for n in ns]
        slopes.append(sp.scaling_exponent(ns, ks))
    ok = all(1.9 <= s <= 2.1 for s in slopes)
    report("kappa scaling N^2", ok, f"slope {slopes[0]:.4f} (N = 8..512 powers of two), "
                                   f"{slopes[1]:.4f} (all even N)")
    assert ok


def test_cycle_limit():
    k = sp.condition_number(sp.numeric_eigs(sp.cycle_hessian(4096, 0.9)))
    rel = abs(k - 361.0) / 361.0
    ok = rel <= 0.05
    report("cycle kappa limit", ok, f"kappa(4096, 0.9) = {k:.10g}, rel dev {rel:.2e}")
    assert ok


@pytest.fixture(scope="module")
def fig1_result():
    return fig1(resolve("fig1"))


def test_fig1_qtable_faster_than_rg(fig1_result):
    c = _check(fig1_result, "fewer updates")
    report("cliff walking: qtable faster than rg (width 10, gamma 0.9)", c.passed, c.detail)
    assert c.passed


def test_fig1_qtable_ratio(fig1_result):
    c = _check(fig1_result, "qtable steps ratio")
    report("cliff walking: qtable steps ratio within 2x of 4", c.passed, c.detail)
    assert c.passed


def test_fig1_rg_ratio(fig1_result):
    c = _check(fig1_result, "rg steps ratio")
    report("cliff walking: rg steps ratio within 2x of 8", c.passed, c.detail)
    assert c.passed


def test_fig2_discount_scaling():
    res = fig2(resolve("fig2"))
    for c in res.checks:
        report(f"discount sweep: {c.name}", c.passed, c.detail)
    assert len(res.checks) == 3
    assert res.ok


def test_fig3_online_exploration():
    res = fig3(resolve("fig3"))
    for c in res.checks:
        report(f"one-way cliff: {c.name}", c.passed, c.detail)
    assert len(res.checks) == 3
    assert res.ok


def test_divergence_semi_gradient():
    ws = semi_gradient_trace(0.9, 0.01, 1.0, 100_000, 1e6)
    ok = abs(ws[-1]) > 1e6 and len(ws) - 1 <= 100_000
    report("divergence: semi-gradient |w| > 1e6 within 1e5 steps", ok, f"{len(ws) - 1} steps")
    assert ok


def test_divergence_cdqn_outer_loop():
    run = outer_iteration(divergence_problem(0.9), "cdqn", 50, tol_inner=1e-8, theta0=[1.0])
    w = abs(float(run.thetas[-1][0]))
    ok_mono = run.non_increasing
    ok_w = w <= 1e-3
    report("divergence: cdqn outer losses non-increasing", ok_mono, f"max increase {run.max_increase:.2e}")
    report("divergence: cdqn |w| <= 1e-3 at termination", ok_w, f"|w| = {w:.6g} after 50 outer steps")
    assert ok_mono and ok_w


def test_cdqn_non_increasing_property():
    cfg = resolve("convergence")
    probs = convergence_problems(cfg)
    exact = run_cdqn_convergence_check(probs, "cdqn", 10, 1e-8, 1e-7)
    relaxed = run_cdqn_convergence_check(probs, "cdqn", 10, 1e-8, 1e-7, relaxed=True)
    report("cdqn chain non-increasing, exact inner minimization", exact.passed,
           f"{exact.n_pass}/{exact.n_total}, worst inner stationarity {exact.max_stationarity:.2e}")
    report("cdqn chain non-increasing, relaxed update", relaxed.passed, f"{relaxed.n_pass}/{relaxed.n_total}")
    assert exact.passed and relaxed.passed


def test_transform_roundtrip():
    x = np.linspace(-1e6, 1e6, 10_000)
    err = np.abs(inverse_transform(transform(x, 0.01), 0.01) - x) / np.maximum(1.0, np.abs(x))
    ok = float(err.max()) <= 1e-9
    report("transform roundtrip", ok, f"max scaled error {err.max():.2e}")
    assert ok


def test_gradient_correctness():
    rng = np.random.default_rng(2024)
    worst_combo = None
    fewest = 101
    for kind in LossKind:
        for shape in Shape:
            for dq in (False, True):
                spec = LossSpec(kind, shape, dq)
                good = 0
                for _ in range(100):
                    nf, na = int(rng.integers(2, 5)), int(rng.integers(2, 4))
                    m = init_model(nf, (int(rng.integers(2, 6)),), na, rng)
                    m = m.with_params(m.params + 0.1 * rng.normal(size=m.params.size))
                    n = int(rng.integers(1, 8))
                    b = Batch(rng.normal(size=(n, nf)), rng.integers(na, size=n), 3 * rng.normal(size=n),
                              rng.normal(size=(n, nf)), rng.random(n) < 0.2)
                    tp = m.params + 0.5 * rng.normal(size=m.params.size)
                    w = rng.random(n) + 0.5
                    _, g, _ = batch_loss_and_grad(b, w, m, tp, spec, 0.95)
                    ng = numeric_gradient(lambda p: batch_loss(b, w, m, tp, spec, 0.95, p), m.params, 1e-6)
                    rel = np.linalg.norm(g - ng) / max(np.linalg.norm(ng), np.linalg.norm(g), 1e-12)
                    good += rel <= 1e-4
                if good < fewest:
                    fewest, worst_combo = good, (kind.value, shape.value, dq)
    ok = fewest >= 99
    report("analytic vs finite-difference gradients", ok,
           f"worst combination {worst_combo}: {fewest}/100 trials within 1e-4")
    assert ok


def _sampler_memory(n=40, seed=0):
    rng = np.random.default_rng(seed)
    mem = ReplayMemory(n, seed=seed)
    ids = [mem.push(Transition(i % 5, int(rng.integers(2)), float(rng.normal()), (i + 1) % 5, False))
           for i in range(n)]
    update_priorities(mem.sampler, mem, [(u, float(rng.exponential(2.0))) for u in ids])
    return mem, ids, rng


def test_sampler_frequencies():
    mem, _, _ = _sampler_memory()
    p = mem.sampler.tree.leaves() / mem.sampler.tree.total
    counts = np.zeros(len(p))
    rng = np.random.default_rng(7)
    n_draws = 100_000
    for _ in range(n_draws // 32):
        for u, _, _ in sample_batch(mem.sampler, mem, 32, rng, 1.0):
            counts[mem.slot_of(u)] += 1
    total = counts.sum()
    z = np.abs(counts - total * p) / np.sqrt(total * p * (1 - p))
    ok = float(z.max()) <= 3.0
    report("sampler frequencies match p_i / sum p", ok, f"max |z| {z.max():.2f} over {int(total)} draws")
    assert ok


def test_sampler_weighted_gradient_is_unbiased():
    mem, ids, rng = _sampler_memory()
    feats = np.eye(5)
    model = init_model(5, (), 2, rng)
    tp = model.params + 0.3 * rng.normal(size=model.params.size)
    spec = LossSpec("cdqn")
    grads = []
    for s in range(mem.capacity):
        b = Batch.from_transitions([mem.store[s]], feats)
        grads.append(batch_loss_and_grad(b, None, model, tp, spec, 0.9)[1])
    grads = np.array(grads)
    uniform = grads.mean(axis=0)
    draws = []
    srng = np.random.default_rng(11)
    for _ in range(100_000 // 32):
        for u, _, w in sample_batch(mem.sampler, mem, 32, srng, 1.0):
            draws.append(w * grads[mem.slot_of(u)])
    draws = np.array(draws)
    est = draws.mean(axis=0)
    se = draws.std(axis=0, ddof=1) / np.sqrt(len(draws))
    z = np.abs(est - uniform) / np.where(se > 0, se, np.inf)
    ok = float(z.max()) <= 3.0
    report("beta = 1 weighted gradient matches the uniform mean", ok, f"max |z| {z.max():.2f}")
    assert ok


def test_sampler_probability_floor():
    mem, ids, rng = _sampler_memory()
    worst = np.inf
    global_min = np.inf
    c, n = mem.sampler.c_p, len(mem)
    for _ in range(200):
        pick = rng.choice(len(ids), size=int(rng.integers(1, 10)), replace=False)
        update_priorities(mem.sampler, mem, [(ids[i], float(rng.exponential(1.0)) ** 3) for i in pick])
        tree = mem.sampler.tree
        probs = np.array([tree[mem.slot_of(ids[i])] for i in pick]) / tree.total
        worst = min(worst, float(probs.min() * c * n))
        global_min = min(global_min, float(tree.leaves().min() / tree.total * c * n))
    ok = worst >= 1.0 - 1e-12
    report("post-update sampling probability >= 1/(c_p N)", ok,
           f"min c_p N p over updated slots {worst:.6f} (over all slots {global_min:.4f})")
    assert ok


def test_frequency_hand_traces():
    got = [estimate_frequency([[1.0]]), estimate_frequency([[0.0, 0.0, 0.0, 1.0]]),
           estimate_frequency([[1.0, 0.0, 3.0]])]
    ok = got[0] == 1.0 and abs(got[1] - 0.4) <= 1e-12 and abs(got[2] - 0.6154) <= 5e-5
    ends = (gamma_from_frequency(10.0), gamma_from_frequency(1e-12), gamma_from_frequency(NO_REWARD))
    ok_g = ends == (GAMMA_MIN, GAMMA_MAX, GAMMA_MAX) and ends == (0.99, 0.9998, 0.9998)
    report("reward-frequency hand traces", ok, ", ".join(f"{g:.6g}" for g in got))
    report("discount clipping endpoints", ok_g, ", ".join(repr(e) for e in ends))
    assert ok and ok_g
