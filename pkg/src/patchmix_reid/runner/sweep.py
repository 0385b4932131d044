"""Grid sweeps over one configuration path."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .config import ExperimentConfig, get_path, with_overrides
from .train import build_datasets, evaluate_encoder, eval_protocol, train


@dataclass
class SweepRow:
    value: Any
    seed: int
    rank1: float
    map: float


def _nested(path: str, value) -> dict:
    out: dict = {}
    node = out
    parts = path.split(".")
    for p in parts[:-1]:
        node[p] = {}
        node = node[p]
    node[parts[-1]] = value
    return out


def sweep(param: str, values: Sequence, cfg: ExperimentConfig, seeds: Sequence[int] | None = None,
          out_dir: str | Path | None = None) -> list[SweepRow]:
    """Train and evaluate once per ``(value, seed)``; every value shares the
    same base seeds so rows differ only by the swept parameter."""
    get_path(cfg, param)
    seeds = list(seeds) if seeds is not None else [cfg.seed]
    rows = []
    for value in values:
        for seed in seeds:
            run_cfg = with_overrides(cfg, {**_nested(param, value), "seed": seed})
            train_index, test_index = build_datasets(run_cfg)
            sub = None
            if out_dir is not None:
                sub = Path(out_dir) / f"{param}={value}" / f"seed{seed}"
            result = train(run_cfg, sub, train_index=train_index, test_index=test_index)
            res = evaluate_encoder(result.encoder, test_index, eval_protocol(run_cfg))
            rows.append(SweepRow(value, seed, res.rank(1), res.map))
    if out_dir is not None:
        write_sweep(rows, param, Path(out_dir))
    return rows


def summarize(rows: list[SweepRow]) -> list[dict]:
    """Per-value mean and standard deviation over seeds, in sweep order."""
    order, groups = [], {}
    for r in rows:
        key = repr(r.value)
        if key not in groups:
            order.append(key)
            groups[key] = []
        groups[key].append(r)
    out = []
    for key in order:
        g = groups[key]
        r1 = np.array([r.rank1 for r in g])
        mp = np.array([r.map for r in g])
        out.append({"value": g[0].value, "n": len(g), "rank1_mean": float(r1.mean()),
                    "rank1_std": float(r1.std(ddof=1)) if len(g) > 1 else 0.0,
                    "map_mean": float(mp.mean()), "map_std": float(mp.std(ddof=1)) if len(g) > 1 else 0.0})
    return out


def best(summary: list[dict], key: str = "rank1_mean") -> dict:
    return max(summary, key=lambda s: s[key])


def write_sweep(rows: list[SweepRow], param: str, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([param, "seed", "rank1", "mAP"])
        w.writerows([[r.value, r.seed, repr(r.rank1), repr(r.map)] for r in rows])
    summary = summarize(rows)
    with open(out_dir / "sweep_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([param, "n", "rank1_mean", "rank1_std", "map_mean", "map_std"])
        for s in summary:
            w.writerow([s["value"], s["n"], repr(s["rank1_mean"]), repr(s["rank1_std"]),
                        repr(s["map_mean"]), repr(s["map_std"])])
    b = best(summary)
    (out_dir / "sweep_best.txt").write_text(
        f"best {param} = {b['value']}: rank1 {100 * b['rank1_mean']:.2f} +- {100 * b['rank1_std']:.2f}, "
        f"mAP {100 * b['map_mean']:.2f}\n")
