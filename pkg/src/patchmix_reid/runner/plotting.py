"""Render report figures from the CSV/JSONL files a run directory holds."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

FIGSIZE = (4.8, 3.2)
STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def plot_cmc(cmc_csv: Path, out: Path, max_rank: int = 20) -> Path:
    rows = _read_csv(cmc_csv)[:max_rank]
    ranks = [int(r["rank"]) for r in rows]
    vals = [100 * float(r["cmc"]) for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=FIGSIZE)
        ax.plot(ranks, vals, marker="o", ms=3, lw=1.2)
        ax.set_xlabel("rank")
        ax.set_ylabel("matching rate (%)")
        ax.set_ylim(0, 100)
        ax.grid(alpha=0.3)
        fig.savefig(out)
        plt.close(fig)
    return out


def plot_cosine(cosine_csv: Path, out: Path) -> Path:
    rows = _read_csv(cosine_csv)
    left = [float(r["bin_left"]) for r in rows]
    width = float(rows[0]["bin_right"]) - left[0]
    pos = [int(r["inter_modality_positive"]) for r in rows]
    neg = [int(r["intra_modality_negative"]) for r in rows]
    tot_p, tot_n = max(sum(pos), 1), max(sum(neg), 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=FIGSIZE)
        ax.bar(left, [v / tot_p for v in pos], width=width, align="edge", alpha=0.6,
               label="inter-modality positive")
        ax.bar(left, [v / tot_n for v in neg], width=width, align="edge", alpha=0.6,
               label="intra-modality negative")
        ax.set_xlabel("cosine similarity")
        ax.set_ylabel("fraction of pairs")
        ax.set_xlim(-1, 1)
        ax.legend(frameon=False)
        fig.savefig(out)
        plt.close(fig)
    return out


def plot_sweep(summary_csv: Path, out: Path) -> Path:
    rows = _read_csv(summary_csv)
    param = next(iter(rows[0]))
    xs = [r[param] for r in rows]
    try:
        xv = [float(x) for x in xs]
        ticks = None
    except ValueError:
        xv, ticks = list(range(len(xs))), xs
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=FIGSIZE)
        for key, label in (("rank1", "Rank-1"), ("map", "mAP")):
            m = [100 * float(r[f"{key}_mean"]) for r in rows]
            s = [100 * float(r[f"{key}_std"]) for r in rows]
            ax.errorbar(xv, m, yerr=s, marker="o", ms=3, capsize=2, lw=1.2, label=label)
        if ticks:
            ax.set_xticks(xv, ticks)
        ax.set_xlabel(param)
        ax.set_ylabel("%")
        ax.legend(frameon=False)
        ax.grid(alpha=0.3)
        fig.savefig(out)
        plt.close(fig)
    return out


def plot_losses(metrics_jsonl: Path, out: Path) -> Path:
    records = [json.loads(line) for line in open(metrics_jsonl) if line.strip()]
    keys = list(records[0]["losses"])
    steps = [r["step"] for r in records]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(FIGSIZE[0] * 1.3, FIGSIZE[1]))
        for k in keys:
            ax.plot(steps, [r["losses"][k] for r in records], lw=0.8, label=k)
        ax.plot(steps, [r["total"] for r in records], lw=1.2, color="k", label="total")
        ax.set_yscale("symlog", linthresh=1e-2)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(frameon=False, ncol=2)
        fig.savefig(out)
        plt.close(fig)
    return out


def render_report(run_dir: str | Path) -> list[Path]:
    """Render every figure whose source table exists under ``run_dir``."""
    run_dir = Path(run_dir)
    made = []
    sources = [("cmc.csv", "cmc.png", plot_cmc), ("cosine.csv", "cosine.png", plot_cosine),
               ("sweep_summary.csv", "sweep.png", plot_sweep), ("metrics.jsonl", "losses.png", plot_losses)]
    for src, dst, fn in sources:
        for path in sorted(run_dir.rglob(src)):
            made.append(fn(path, path.parent / dst))
    return made
