"""INI experiment configuration with per-key validation.

Values resolve in order: schema defaults, the experiment preset, the
config file, then command-line overrides. Every key is validated before
any compute; errors name the offending key.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field

EXPERIMENTS = ("fig1", "fig2", "fig3", "spectral", "divergence", "convergence", "incomplete", "train")


class ConfigError(ValueError):
    pass


def _bool(s):
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _list(item):
    def parse(s):
        if isinstance(s, (list, tuple)):
            return [item(x) for x in s]
        parts = [p.strip() for p in str(s).split(",")]
        return [item(p) for p in parts if p]
    return parse


def _opt_float(s):
    return None if str(s).strip().lower() in ("auto", "none") else float(s)


def _choice(*opts):
    def parse(s):
        v = str(s).strip().lower()
        if v not in opts:
            raise ValueError(f"must be one of {', '.join(opts)}; got {s!r}")
        return v
    return parse


@dataclass(frozen=True)
class Param:
    parse: object
    default: object
    check: object = None      # value -> error string or None
    doc: str = ""


def _rng(lo=None, hi=None, lo_open=False, hi_open=False):
    def chk(v):
        vals = v if isinstance(v, list) else [v]
        for x in vals:
            if x is None:
                continue
            if lo is not None and (x < lo or (lo_open and x == lo)):
                return f"must be {'>' if lo_open else '>='} {lo}, got {x}"
            if hi is not None and (x > hi or (hi_open and x == hi)):
                return f"must be {'<' if hi_open else '<='} {hi}, got {x}"
        return None
    return chk


def _nonempty(inner=None):
    def chk(v):
        if not v:
            return "must not be empty"
        return inner(v) if inner else None
    return chk


_RULES = _choice("qtable", "rg", "rg_tie_split")
_KINDS = _choice("dqn", "msbe", "cdqn")

SCHEMA = {
    "experiment.name": Param(_choice(*EXPERIMENTS), None, None, "experiment to run"),
    "experiment.seeds": Param(int, 10, _rng(1), "number of runs"),
    "experiment.master_seed": Param(int, 0, _rng(0), "root of the per-run seed tree"),
    "experiment.output": Param(str, "runs", None, "output directory"),

    "env.kind": Param(_choice("cliff", "one_way_cliff", "random"), "cliff"),
    "env.widths": Param(_list(int), [10], _nonempty(_rng(2)), "cliff widths (zipped with learner.gammas)"),
    "env.height": Param(int, 4, _rng(2)),
    "env.length": Param(int, 8, _rng(1), "one-way cliff length"),
    "env.max_states": Param(int, 20, _rng(3), "largest random MDP"),

    "learner.rules": Param(_list(_RULES), ["qtable", "rg"], _nonempty()),
    "learner.alpha": Param(float, 0.5, _rng(0.0, 1.0, lo_open=True)),
    "learner.gammas": Param(_list(float), [0.9], _nonempty(_rng(0.0, 1.0))),

    "budget.updates": Param(int, 10_000_000, _rng(0)),
    "budget.threshold": Param(float, 1.0, _rng(0.0, lo_open=True), "|Q - Q*|^2 threshold"),
    "budget.episodes": Param(int, 1000, _rng(0)),
    "budget.per_decade": Param(int, 30, _rng(1), "log-spaced eval points per decade"),
    "budget.eval_every": Param(int, 10, _rng(1), "episodes between greedy evaluations"),
    "explore.epsilons": Param(_list(float), [0.0, 0.1, 0.3], _nonempty(_rng(0.0, 1.0))),

    "spectral.kind": Param(_choice("trajectory", "cycle"), "trajectory"),
    "spectral.ns": Param(_list(int), [2, 4, 8, 16, 32, 64, 128, 256, 512], _nonempty(_rng(2))),
    "spectral.gamma": Param(float, 0.9, _rng(0.0, 1.0, lo_open=True)),
    "spectral.method": Param(_choice("lapack", "jacobi"), "lapack"),

    "divergence.gamma": Param(float, 0.9, _rng(0.0, 1.0)),
    "divergence.alpha": Param(float, 0.01, _rng(0.0, lo_open=True)),
    "divergence.w0": Param(float, 1.0),
    "divergence.steps": Param(int, 100_000, _rng(1)),
    "divergence.bound": Param(float, 1e6, _rng(0.0, lo_open=True)),
    "divergence.n_outer": Param(int, 50, _rng(1)),
    "divergence.w_tol": Param(float, 1e-3, _rng(0.0, lo_open=True)),

    "convergence.instances": Param(int, 100, _rng(1)),
    "convergence.kinds": Param(_list(_choice("dqn", "cdqn")), ["cdqn", "dqn"], _nonempty()),
    "convergence.n_outer": Param(int, 10, _rng(1)),
    "convergence.tol_inner": Param(float, 1e-8, _rng(0.0, lo_open=True)),
    "convergence.slack": Param(float, 1e-7, _rng(0.0)),
    "convergence.gamma": Param(float, 0.9, _rng(0.0, 1.0)),
    "convergence.relaxed": Param(_bool, True, None, "also run the relaxed-update variant"),

    "train.kinds": Param(_list(_KINDS), ["dqn", "cdqn"], _nonempty()),
    "train.shape": Param(_choice("squared", "huber", "transformed"), "squared"),
    "train.double_q": Param(_bool, False),
    "train.eps_t": Param(float, 0.01, _rng(0.0, lo_open=True)),
    "train.hidden": Param(_list(int), [32], _rng(1)),
    "train.lr": Param(float, 1e-3, _rng(0.0, lo_open=True)),
    "train.eps_a": Param(float, 1.5e-4, _rng(0.0, lo_open=True)),
    "train.clip_norm": Param(float, 10.0, _rng(0.0, lo_open=True)),
    "train.batch_size": Param(int, 32, _rng(1)),
    "train.target_period": Param(int, 50, _rng(1)),
    "train.steps": Param(int, 10_000, _rng(0)),
    "train.learning_starts": Param(int, 500, _rng(0)),
    "train.gamma": Param(_opt_float, 0.9, _rng(0.0, 1.0, hi_open=True), "'auto' estimates it from warm-up"),
    "train.c_gamma": Param(float, 10.0, _rng(0.0, lo_open=True)),
    "train.normalize": Param(_bool, False),
    "train.max_episode_steps": Param(int, 100, _rng(1)),
    "train.eval_every": Param(int, 500, _rng(1)),
    "train.log_every": Param(int, 100, _rng(1)),

    "replay.capacity": Param(int, 10_000, _rng(1)),
    "replay.strategy": Param(_choice("fifo", "random_replace"), "fifo"),
    "replay.discard_prob": Param(float, 0.0, _rng(0.0, 1.0, hi_open=True)),
    "replay.prioritized": Param(_bool, True),
    "replay.alpha_p": Param(float, 0.6, _rng(0.0)),
    "replay.c_p": Param(float, 10.0, _rng(1.0, lo_open=True)),

    "incomplete.discard_prob": Param(float, 0.5, _rng(0.0, 1.0, hi_open=True)),
    "incomplete.capacity_fraction": Param(float, 0.1, _rng(0.0, 1.0, lo_open=True)),
    "incomplete.blowup_factor": Param(float, 10.0, _rng(1.0)),
}

PRESETS = {
    "fig1": {"env.kind": "cliff", "env.widths": [10, 20], "learner.gammas": [0.9, 0.95], "experiment.seeds": 10},
    "fig2": {"env.kind": "cliff", "env.widths": [10], "learner.gammas": [0.9, 0.95, 0.98, 1.0],
             "experiment.seeds": 10},
    "fig3": {"env.kind": "one_way_cliff", "learner.gammas": [1.0], "experiment.seeds": 100},
    "spectral": {"experiment.seeds": 1},
    "divergence": {"experiment.seeds": 1},
    "convergence": {"experiment.seeds": 1},
    "incomplete": {"env.kind": "cliff", "env.widths": [6], "env.height": 3, "experiment.seeds": 3},
    "train": {"env.kind": "cliff", "env.widths": [6], "env.height": 3, "experiment.seeds": 3},
}


@dataclass
class ExperimentConfig:
    name: str
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def section(self, name: str) -> dict:
        p = name + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def snapshot(self) -> dict:
        return {k: self.values[k] for k in sorted(self.values)}

    @property
    def n_runs(self) -> int:
        return self.values["experiment.seeds"]


def _set(values, key, raw, origin):
    if key not in SCHEMA:
        raise ConfigError(f"{key}: unknown key ({origin})")
    p = SCHEMA[key]
    try:
        v = p.parse(raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{key}: cannot parse {raw!r} ({e})") from None
    values[key] = v


def _validate(values):
    for key, v in values.items():
        chk = SCHEMA[key].check
        if chk is not None:
            msg = chk(v)
            if msg:
                raise ConfigError(f"{key}: {msg}")
    if values["env.kind"] == "cliff" and len(values["env.widths"]) not in (1, len(values["learner.gammas"])):
        raise ConfigError("env.widths: needs one entry or one per learner.gammas entry")
    if values["experiment.name"] in ("fig3",) and values["env.kind"] != "one_way_cliff":
        raise ConfigError("env.kind: fig3 runs on one_way_cliff")
    return values


def resolve(name=None, file_text: str | None = None, overrides=()) -> ExperimentConfig:
    """Build a validated config. ``overrides`` is an iterable of 'section.key=value' strings."""
    parsed = {}
    if file_text is not None:
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(file_text)
        except configparser.Error as e:
            raise ConfigError(f"malformed config: {e}") from None
        for sec in cp.sections():
            for k, raw in cp.items(sec):
                parsed[f"{sec}.{k}"] = raw
    over = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        k, raw = item.split("=", 1)
        over[k.strip()] = raw.strip()
    if name is None:
        name = over.get("experiment.name", parsed.get("experiment.name"))
    if name is None:
        raise ConfigError("experiment.name: missing")
    name = str(name).strip().lower()
    if name not in EXPERIMENTS:
        raise ConfigError(f"experiment.name: unknown experiment {name!r} (choose from {', '.join(EXPERIMENTS)})")
    values = {k: p.default for k, p in SCHEMA.items()}
    values.update(PRESETS.get(name, {}))
    values["experiment.name"] = name
    for origin, src in (("config file", parsed), ("override", over)):
        for k, raw in src.items():
            if k == "experiment.name":
                if str(raw).strip().lower() != name:
                    raise ConfigError(f"experiment.name: {raw!r} conflicts with subcommand {name!r}")
                continue
            _set(values, k, raw, origin)
    return ExperimentConfig(name, _validate(values))


def load(path, name=None, overrides=()) -> ExperimentConfig:
    with open(path) as fh:
        return resolve(name, fh.read(), overrides)
