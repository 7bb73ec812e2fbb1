"""Command-line entry point: one subcommand per experiment family, plus ``run CONFIG``."""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from .config import EXPERIMENTS, ConfigError, resolve
from .experiments import run_experiment
from .output import summary_text, write_outputs


def _common(p):
    p.add_argument("--config", help="INI config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--output", help="output directory (default: experiment.output/<name>)")
    p.add_argument("--seeds", type=int, help="number of runs")
    p.add_argument("--quiet", action="store_true", help="do not print the summary")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cdqn-lab", description="Tabular, spectral and C-DQN experiments.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        _common(sub.add_parser(name, help=f"run the {name} experiment"))
    p = sub.add_parser("run", help="run the experiment named in a config file")
    p.add_argument("config_file")
    _common(p)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = list(args.overrides)
    if args.seeds is not None:
        overrides.append(f"experiment.seeds={args.seeds}")
    cfg_path = args.config_file if args.command == "run" else args.config
    name = None if args.command == "run" else args.command
    try:
        text = Path(cfg_path).read_text() if cfg_path else None
        cfg = resolve(name, text, overrides)
    except (ConfigError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    out = Path(args.output) if args.output else Path(cfg["experiment.output"]) / cfg.name
    t0 = time.perf_counter()
    result = run_experiment(cfg)
    write_outputs(cfg, result, out, time.perf_counter() - t0)
    if not args.quiet:
        print(summary_text(cfg, result), end="")
        print(f"outputs in {out}")
    return 0 if result.ok else 1


if __name__ == "__main__":
    sys.exit(main())
