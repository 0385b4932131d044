"""Command-line entry point: ``train``, ``eval``, ``sweep``, ``mix``, ``synth``, ``report``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from .. import data as D
from ..errors import ReIDError
from ..patchmix import MixConfig, Modality, ModalityImage, patch_mix
from .config import ExperimentConfig, _build, parse_config, with_overrides
from .plotting import render_report
from .sweep import best, summarize, sweep
from .train import build_datasets, default_run_root, evaluate, load_checkpoint, train

log = logging.getLogger("patchmix_reid")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML experiment config")
    p.add_argument("--preset", help="named preset (paper, toy)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. --set mix.ratio_p=0.5 (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, help="output directory (default: $PATCHMIX_RUNS/<command>)")


def _config(args) -> ExperimentConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return parse_config(args.config, overrides, preset=args.preset)


def _out(args, name: str) -> Path:
    return args.out or default_run_root() / name


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out(args, f"train-{cfg.preset}-seed{cfg.seed}")
    train_index, test_index = build_datasets(cfg)
    result = train(cfg, out, train_index=train_index, test_index=test_index)
    res = evaluate(result.checkpoint, cfg, out, test_index=test_index)
    print((out / "report.txt").read_text(), end="")
    log.info("checkpoint %s; Rank-1 %.2f mAP %.2f", result.checkpoint, 100 * res.rank(1), 100 * res.map)
    return 0


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    if args.config or args.preset:
        cfg = _config(args)
    else:
        saved = _build(ExperimentConfig, state["config"])
        extra = list(args.overrides) + ([f"seed={args.seed}"] if args.seed is not None else [])
        cfg = with_overrides(saved, extra) if extra else saved
    out = _out(args, "eval")
    evaluate(state, cfg, out)
    print((out / "report.txt").read_text(), end="")
    return 0


def _parse_value(text: str):
    return yaml.safe_load(text)


def cmd_sweep(args) -> int:
    cfg = _config(args)
    values = [_parse_value(v) for v in args.values.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    out = _out(args, f"sweep-{args.param}")
    rows = sweep(args.param, values, cfg, seeds, out)
    for s in summarize(rows):
        print(f"{args.param}={s['value']}: rank1 {100 * s['rank1_mean']:6.2f} +- {100 * s['rank1_std']:.2f}"
              f"  mAP {100 * s['map_mean']:6.2f}")
    print(f"best: {args.param}={best(summarize(rows))['value']}")
    render_report(out)
    return 0


def cmd_mix(args) -> int:
    rgb_px = D.read_image(args.rgb)
    ir_px = D.read_image(args.ir)
    if rgb_px.shape != ir_px.shape:
        ir_px = D.resize(ir_px, rgb_px.shape[:2])
    cfg = MixConfig(args.patch, args.patch_width or args.patch, args.p)
    rng = np.random.default_rng(args.seed or 0)
    mixed, mask = patch_mix(ModalityImage(rgb_px, Modality.RGB, 0), ModalityImage(ir_px, Modality.IR, 0), cfg, rng)
    out = _out(args, "mix")
    out.mkdir(parents=True, exist_ok=True)
    D.write_image(out / "mixed.png", mixed.pixels)
    (out / "mask.txt").write_text(mask.to_text() + "\n")
    print(f"wrote {out / 'mixed.png'} ({100 * mask.rgb_fraction:.1f}% RGB patches)")
    return 0


def cmd_synth(args) -> int:
    cfg = _config(args)
    train_index, test_index = build_datasets(cfg)
    out = _out(args, "synth")
    D.materialize_flat(train_index, out / "train")
    D.materialize_flat(test_index, out / "test")
    print(f"wrote {len(train_index.records)} train and {len(test_index.records)} test images to {out}")
    return 0


def cmd_report(args) -> int:
    made = render_report(args.run)
    for p in made:
        print(p)
    return 0 if made else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchmix-reid", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one experiment, then evaluate it")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("checkpoint", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="grid-sweep one config path")
    _common(p)
    p.add_argument("--param", required=True, help="dotted config path, e.g. mix.ratio_p")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--seeds", help="comma-separated seeds (default: the config seed)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("mix", help="patch-mix two image files")
    p.add_argument("--rgb", type=Path, required=True)
    p.add_argument("--ir", type=Path, required=True)
    p.add_argument("--p", type=float, default=0.1, help="probability of an RGB patch")
    p.add_argument("--patch", type=int, default=16, help="patch height (and width unless --patch-width)")
    p.add_argument("--patch-width", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("synth", help="write the configured synthetic dataset in FLAT layout")
    _common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("report", help="render figures from the tables in a run directory")
    p.add_argument("run", type=Path)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ReIDError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
