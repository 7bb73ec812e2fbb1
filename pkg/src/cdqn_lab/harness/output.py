"""CSV, summary and run-record emission."""
from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from .. import __version__


def artifact_version() -> str:
    """Package version plus a short digest of the package sources."""
    root = Path(__file__).resolve().parents[1]
    h = hashlib.sha256()
    for p in sorted(root.rglob("*.py")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])


def summary_text(cfg, result) -> str:
    lines = [f"experiment: {cfg.name}", f"runs: {cfg.n_runs}  master_seed: {cfg['experiment.master_seed']}", ""]
    lines += result.summary
    if result.checks:
        lines += ["", "checks:"]
        width = max(len(c.name) for c in result.checks)
        for c in result.checks:
            lines.append(f"  [{'PASS' if c.passed else 'FAIL'}] {c.name.ljust(width)}  {c.detail}")
    return "\n".join(lines) + "\n"


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return x


def write_outputs(cfg, result, out_dir, wall_seconds: float) -> list:
    """One CSV per metric, summary.txt and record.json. Returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in sorted(result.tables):
        header, rows = result.tables[name]
        p = out / f"{name}.csv"
        write_csv(p, header, rows)
        paths.append(p)
    p = out / "summary.txt"
    p.write_text(summary_text(cfg, result))
    paths.append(p)
    record = {"config": cfg.snapshot(), "artifact_version": artifact_version(), "wall_clock_seconds": wall_seconds,
              "checks": [{"name": c.name, "passed": c.passed, "detail": c.detail} for c in result.checks],
              "info": result.info}
    p = out / "record.json"
    p.write_text(json.dumps(_jsonable(record), indent=2, sort_keys=True) + "\n")
    paths.append(p)
    return paths
