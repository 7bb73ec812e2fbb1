import json

import numpy as np
import pytest

from cdqn_lab.harness.cli import main
from cdqn_lab.harness.config import SCHEMA, ConfigError, resolve
from cdqn_lab.harness.experiments import fig1, loss_blowup, mean_se, run_experiment, run_seed, semi_gradient_trace

SMALL_FIG1 = ["env.widths=4", "env.height=2", "learner.gammas=0.5", "experiment.seeds=2",
              "budget.updates=3000", "budget.per_decade=5"]
SMALL_TRAIN = ["train.steps=300", "train.learning_starts=100", "train.eval_every=100", "train.log_every=50",
               "experiment.seeds=1", "train.hidden=8", "replay.capacity=200"]


@pytest.mark.parametrize("item, key", [
    ("learner.alpha=0", "learner.alpha"),
    ("learner.alpha=1.5", "learner.alpha"),
    ("learner.gammas=0.9,1.2", "learner.gammas"),
    ("budget.updates=-1", "budget.updates"),
    ("budget.updates=lots", "budget.updates"),
    ("learner.rules=qtable,sarsa", "learner.rules"),
    ("replay.c_p=1", "replay.c_p"),
    ("train.gamma=1.0", "train.gamma"),
    ("nosuch.key=1", "nosuch.key"),
    ("env.widths=", "env.widths"),
])
def test_invalid_values_name_the_key(item, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        resolve("fig1", None, [item])


def test_unknown_experiment():
    with pytest.raises(ConfigError, match="experiment.name"):
        resolve("fig9")
    with pytest.raises(ConfigError, match="experiment.name"):
        resolve(None)


def test_layering_order():
    text = "[learner]\nalpha = 0.25\ngammas = 0.8\n[env]\nwidths = 3\n"
    cfg = resolve("fig1", text, ["learner.alpha=0.125"])
    assert cfg["learner.alpha"] == 0.125
    assert cfg["learner.gammas"] == [0.8]
    assert cfg["env.widths"] == [3]
    # untouched keys keep the preset, then the default
    assert cfg["experiment.seeds"] == 10
    assert cfg["budget.threshold"] == SCHEMA["budget.threshold"].default


def test_mismatched_widths_and_gammas():
    with pytest.raises(ConfigError, match="env.widths"):
        resolve("fig1", None, ["env.widths=4,5,6", "learner.gammas=0.9,0.95"])


def test_malformed_file():
    with pytest.raises(ConfigError, match="malformed"):
        resolve("fig1", "alpha = 3\n")


def test_auto_gamma():
    assert resolve("train", None, ["train.gamma=auto"])["train.gamma"] is None


def test_run_seeds_are_distinct_and_stable():
    cfg = resolve("fig1")
    a = [np.random.default_rng(run_seed(cfg, i)).integers(1 << 62) for i in range(3)]
    b = [np.random.default_rng(run_seed(cfg, i)).integers(1 << 62) for i in range(3)]
    assert a == b and len(set(a)) == 3


def test_mean_se():
    m, se = mean_se([1.0, 2.0, 3.0])
    assert m == 2.0 and se == pytest.approx(1.0 / np.sqrt(3))


def test_loss_blowup():
    assert loss_blowup([1, 2, 1, 1, 1, 1, 1, 1, 1, 1]) == 2.0
    assert loss_blowup([5, 1, 1, 1, 1, 1, 1, 1, 1, 20]) == 4.0
    assert loss_blowup([]) == 0.0


def test_semi_gradient_trace_is_geometric():
    # w <- w (1 + alpha (2 gamma - 1))
    ws = semi_gradient_trace(0.9, 0.01, 1.0, 10, 1e6)
    np.testing.assert_allclose(ws, 1.008 ** np.arange(11), rtol=1e-12)


def test_zero_budget_fig1():
    cfg = resolve("fig1", None, SMALL_FIG1 + ["budget.updates=0"])
    res = fig1(cfg)
    assert res.tables


def _csv_bytes(d):
    return {p.name: p.read_bytes() for p in sorted(d.glob("*.csv"))} | {"summary": (d / "summary.txt").read_bytes()}


def test_cli_outputs_are_deterministic(tmp_path):
    args = ["fig1", "--quiet"] + [x for s in SMALL_FIG1 for x in ("--set", s)]
    rc1 = main(args + ["--output", str(tmp_path / "a")])
    rc2 = main(args + ["--output", str(tmp_path / "b")])
    assert rc1 == rc2
    a, b = _csv_bytes(tmp_path / "a"), _csv_bytes(tmp_path / "b")
    assert a == b and len(a) >= 2
    rec = json.loads((tmp_path / "a" / "record.json").read_text())
    assert rec["config"]["env.widths"] == [4]
    assert "+" in rec["artifact_version"]
    assert rec["wall_clock_seconds"] >= 0


def test_cli_config_error_exit_code(tmp_path, capsys):
    assert main(["fig1", "--set", "learner.alpha=2", "--output", str(tmp_path)]) == 2
    assert "learner.alpha" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.ini")]) == 2


def test_cli_run_config_file(tmp_path):
    ini = tmp_path / "div.ini"
    ini.write_text("[experiment]\nname = divergence\n[divergence]\nsteps = 2000\nn_outer = 3\n")
    rc = main(["run", str(ini), "--quiet", "--output", str(tmp_path / "out")])
    rec = json.loads((tmp_path / "out" / "record.json").read_text())
    assert rec["config"]["divergence.steps"] == 2000
    # exit code reflects the checks
    assert rc == (0 if all(c["passed"] for c in rec["checks"]) else 1)


def test_cli_failing_check_exit_code(tmp_path):
    # the semi-gradient run cannot pass a bound of 1e6 in 10 steps
    rc = main(["divergence", "--quiet", "--set", "divergence.steps=10", "--set", "divergence.n_outer=2",
               "--output", str(tmp_path)])
    assert rc == 1


@pytest.mark.parametrize("name", ["train", "incomplete"])
def test_training_smoke(name):
    over = SMALL_TRAIN + (["replay.capacity=200", "incomplete.capacity_fraction=0.25"] if name == "incomplete" else [])
    res = run_experiment(resolve(name, None, over))
    header, rows = res.tables["loss"]
    assert header[-1] == "loss" and rows
    assert all(np.isfinite(r[-1]) for r in rows)
    variants = {r[1] for r in rows}
    assert variants == ({"default"} if name == "train" else {"complete", "discard", "random_replace"})
    if name == "incomplete":
        assert len(res.checks) == 2


def test_training_smoke_auto_gamma():
    res = run_experiment(resolve("train", None, SMALL_TRAIN + ["train.gamma=auto", "train.normalize=true",
                                                               "train.kinds=cdqn"]))
    rep = res.info["gamma_reports"]["cdqn/default"][0]
    assert 0.99 <= rep["gamma"] <= 0.9998
