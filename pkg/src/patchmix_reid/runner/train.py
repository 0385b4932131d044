"""End-to-end training and evaluation of one experiment."""
from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .. import data as D
from ..bank import CenterBank, c2c_terms
from ..errors import NumericError, VersionError
from ..evaluation import (EvalProtocol, EvalResult, average_trials, build_eval_split,
                          cosine_distribution, evaluate_embeddings)
from ..losses import (LossWeights, MuSchedule, S2SProjector, hard_triplet_loss, id_loss,
                      mu_schedule, part_align_loss, pmml_loss, s2s_loss, total_loss)
from ..model import Encoder, ModelConfig, build_encoder, extract_embeddings, images_to_tensor
from ..patchmix import MixConfig, Modality, Strategy, generate_comparator, patch_mix
from .config import ExperimentConfig, dump_config
from .schedule import LRSchedule, lr_schedule

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
RUNS_ENV = "PATCHMIX_RUNS"


def default_run_root() -> Path:
    return Path(os.environ.get(RUNS_ENV, "runs"))


def build_datasets(cfg: ExperimentConfig) -> tuple[D.DatasetIndex, D.DatasetIndex]:
    d = cfg.data
    if d.source == "path":
        root = Path(d.path)
        return (D.load_dataset(root / "train", d.layout),
                D.load_dataset(root / "test", d.layout, paired=False))
    s = d.synth
    # data draws use their own stream so the test set never depends on training
    rng = np.random.default_rng([cfg.seed, 17])
    train = D.synth_dataset(D.SynthSpec(s.identities, s.n_rgb, s.n_ir, d.image_height, d.image_width, s.noise), rng)
    test = D.synth_dataset(D.SynthSpec(s.test_identities, s.test_n_rgb, s.test_n_ir, d.image_height,
                                       d.image_width, s.noise), rng, label_offset=s.identities)
    return train, test


def model_config(cfg: ExperimentConfig, class_count: int) -> ModelConfig:
    m = cfg.model
    return ModelConfig(class_count=class_count, part_count=m.part_count, stem_count=m.stem_count,
                       stem_width=m.stem_width, stem_kernel=m.stem_kernel,
                       stem_stride=m.stem_stride, stem_pool=m.stem_pool, stage_widths=m.stage_widths,
                       stage_depths=m.stage_depths, stage_strides=m.stage_strides,
                       attention_after=m.attention_after, attention_reduction=m.attention_reduction,
                       input_size=(cfg.data.image_height, cfg.data.image_width))


def loss_weights(cfg: ExperimentConfig) -> LossWeights:
    l = cfg.loss
    return LossWeights(l.lambda1, l.lambda2, l.lambda3, l.triplet_margin, cfg.mix.ratio_p)


def lr_sched(cfg: ExperimentConfig) -> LRSchedule:
    o = cfg.optim
    return LRSchedule(o.lr, o.warmup_epochs, o.milestones, o.gamma, cfg.train.epochs)


def mu_sched(cfg: ExperimentConfig) -> MuSchedule:
    return MuSchedule(cfg.mu.max_value, cfg.mu.ramp_epochs, cfg.train.epochs)


def eval_protocol(cfg: ExperimentConfig) -> EvalProtocol:
    e = cfg.eval
    return EvalProtocol(e.query, e.gallery, e.shots, e.gallery_cameras, e.trials, e.seed)


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)


@dataclass
class TrainResult:
    checkpoint: Path | None
    log: TrainLog
    encoder: Encoder
    bank: CenterBank
    run_dir: Path | None


class Trainer:
    """Owns every piece of mutable training state for one run."""

    def __init__(self, cfg: ExperimentConfig, train_index: D.DatasetIndex):
        self.cfg = cfg
        self.index = train_index
        Y = train_index.identity_count
        self.model_cfg = model_config(cfg, Y)
        torch.manual_seed(cfg.seed)
        self.encoder = build_encoder(self.model_cfg, seed=cfg.seed)
        dim = self.model_cfg.feature_dim
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed + 1)
            self.proj_g = S2SProjector(dim)
            self.proj_p = S2SProjector(dim)
        self.bank = CenterBank(Y, self.model_cfg.part_count, dim, cfg.bank.momentum, cfg.bank.start_epoch)
        params = [*self.encoder.parameters(), *self.proj_g.parameters(), *self.proj_p.parameters()]
        o = cfg.optim
        self.optimizer = torch.optim.SGD([p for p in params if p.requires_grad], lr=0.0,
                                         momentum=o.momentum, weight_decay=o.weight_decay)
        self.rng = np.random.default_rng([cfg.seed, 29])
        self.weights = loss_weights(cfg)
        self.lr_sched = lr_sched(cfg)
        self.mu_sched = mu_sched(cfg)
        d = cfg.data
        self.pk = D.PKConfig(d.identities_per_batch, d.images_per_identity)
        self.aug = D.AugmentConfig((d.image_height, d.image_width), d.hflip_prob, d.channel_erase_prob)
        self.mix_cfg = MixConfig(cfg.mix.patch_height, cfg.mix.patch_width, cfg.mix.ratio_p)
        self.steps_per_epoch = d.steps_per_epoch or max(
            1, max(train_index.count(Modality.RGB), train_index.count(Modality.IR)) // (self.pk.batch_size // 2))
        self.step_count = 0

    # -- one step ------------------------------------------------------------

    def _mixed(self, rgb, ir):
        strategy = Strategy(self.cfg.mix.strategy)
        if strategy is Strategy.PATCHMIX:
            return [patch_mix(v, i, self.mix_cfg, self.rng)[0] for v, i in zip(rgb, ir)]
        params = {"alpha": self.cfg.mix.mixup_alpha}
        return [generate_comparator(strategy, v, i, params, self.rng) for v, i in zip(rgb, ir)]

    def compute_losses(self, batch: D.Batch, epoch: int, mu: float) -> dict[str, torch.Tensor]:
        en = self.cfg.enable
        rgb = [D.augment(im, self.aug, self.rng) for im in batch.rgb]
        ir = [D.augment(im, self.aug, self.rng) for im in batch.ir]
        labels = torch.as_tensor(batch.labels, dtype=torch.long)
        n = len(rgb)
        inputs = [(Modality.RGB, images_to_tensor(rgb)), (Modality.IR, images_to_tensor(ir))]
        if en.patchmix:
            inputs.append((Modality.MIX, images_to_tensor(self._mixed(rgb, ir))))
        out = self.encoder(inputs)
        bv, bi = out[:n], out[n:2 * n]
        both = out[:2 * n]
        labels2 = torch.cat([labels, labels])
        labels_all = labels.repeat(len(inputs))

        comps: dict[str, torch.Tensor] = {
            "id_g": id_loss(out.global_logits, labels_all),
            "tri": hard_triplet_loss(both.global_feat, labels2, self.weights.triplet_margin),
            "s2s_g": s2s_loss(bv.global_feat, bi.global_feat, self.proj_g),
        }
        P = self.model_cfg.part_count
        if en.part:
            comps["id_p"] = sum(id_loss(out.part_logits[:, k], labels_all) for k in range(P))
            comps["s2s_p"] = sum(s2s_loss(bv.part_feats[:, k], bi.part_feats[:, k], self.proj_p) for k in range(P))
        if en.part_align:
            comps["part_align"] = part_align_loss(both.global_logits, both.part_logits)
        if en.c2c:
            self.bank.update(both.global_feat, both.part_feats, labels2, both.modalities)
            active = epoch >= self.bank.start_epoch and bool(self.bank.initialized.all())
            g, p = c2c_terms(self.bank) if active else (torch.zeros(()), torch.zeros(()))
            comps["c2c_g"] = g
            if en.part:
                comps["c2c_p"] = p
        if en.pmml:
            comps["pmml"] = pmml_loss(bv, bi, out[2 * n:], self.weights.p)
        return comps

    def step(self, epoch: int, frac: float) -> dict:
        warm = self.lr_sched.warmup_epochs
        lr = lr_schedule(min(epoch + frac, warm) if epoch < warm else epoch, self.lr_sched)
        mu = mu_schedule(epoch, self.mu_sched)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.encoder.train()
        batch = D.sample_batch(self.index, self.pk, self.rng)
        comps = self.compute_losses(batch, epoch, mu)
        loss = total_loss(comps, self.weights, mu)
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite total loss at step {self.step_count}: "
                               + ", ".join(f"{k}={float(v):.4g}" for k, v in comps.items()))
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        self.bank.live = None
        record = {"step": self.step_count, "epoch": epoch, "lr": lr, "mu": mu,
                  "losses": {k: float(v.detach()) for k, v in comps.items()}, "total": float(loss.detach())}
        self.step_count += 1
        return record

    # -- persistence ---------------------------------------------------------

    def state(self, epoch: int) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "epoch": epoch,
            "config": self.cfg.to_dict(),
            "model_config": asdict(self.model_cfg),
            "encoder": self.encoder.state_dict(),
            "proj_g": self.proj_g.state_dict(),
            "proj_p": self.proj_p.state_dict(),
            "bank": self.bank.state_dict(),
        }


def save_checkpoint(state: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    torch.save(state, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> dict:
    state = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(state, dict) or state.get("version") != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {state.get('version') if isinstance(state, dict) else None}")
    return state


def encoder_from_checkpoint(state: dict) -> Encoder:
    mc = state["model_config"]
    mc = {k: tuple(v) if isinstance(v, list) else v for k, v in mc.items()}
    enc = Encoder(ModelConfig(**mc))
    enc.load_state_dict(state["encoder"])
    enc.eval()
    return enc


def train(cfg: ExperimentConfig, out_dir: str | Path | None = None, test_index: D.DatasetIndex | None = None,
          train_index: D.DatasetIndex | None = None) -> TrainResult:
    """Train one experiment; with ``out_dir`` the run directory receives the
    config echo, ``metrics.jsonl`` and ``checkpoints/last.pt``."""
    torch.set_num_threads(cfg.train.threads)
    if train_index is None or (test_index is None and cfg.train.eval_every):
        built_train, built_test = build_datasets(cfg)
        train_index = train_index or built_train
        test_index = test_index or built_test
    trainer = Trainer(cfg, train_index)
    run_dir = Path(out_dir) if out_dir is not None else None
    metrics = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, run_dir / "config.yaml")
        metrics = open(run_dir / "metrics.jsonl", "w")
    log = TrainLog()
    ckpt = None
    try:
        for epoch in range(cfg.train.epochs):
            records = [trainer.step(epoch, s / trainer.steps_per_epoch) for s in range(trainer.steps_per_epoch)]
            log.steps += records
            summary = {"epoch": epoch, "lr": records[-1]["lr"], "mu": records[-1]["mu"],
                       "losses": {k: float(np.mean([r["losses"][k] for r in records])) for k in records[0]["losses"]}}
            log.epochs.append(summary)
            logger.info("epoch %d lr %.4g mu %.3g %s", epoch, summary["lr"], summary["mu"],
                        " ".join(f"{k}={v:.3f}" for k, v in summary["losses"].items()))
            if metrics is not None:
                for r in records:
                    metrics.write(json.dumps(r) + "\n")
                metrics.flush()
                ckpt = run_dir / "checkpoints" / "last.pt"
                save_checkpoint(trainer.state(epoch), ckpt)
            every = cfg.train.eval_every
            if every and (epoch + 1) % every == 0 and epoch + 1 < cfg.train.epochs:
                res = evaluate_encoder(trainer.encoder, test_index, eval_protocol(cfg))
                log.evals.append({"epoch": epoch, "rank1": res.rank(1), "map": res.map})
    finally:
        if metrics is not None:
            metrics.close()
    return TrainResult(ckpt, log, trainer.encoder, trainer.bank, run_dir)


# --- evaluation ----------------------------------------------------------------

def evaluate_encoder(enc: Encoder, test_index: D.DatasetIndex, proto: EvalProtocol,
                     embeddings: np.ndarray | None = None) -> EvalResult:
    if embeddings is None:
        embeddings = extract_embeddings(enc, [r.load() for r in test_index.records])
    labels = np.array([r.identity for r in test_index.records])
    results = []
    for trial in range(proto.trials):
        q, g = build_eval_split(test_index, proto, trial)
        results.append(evaluate_embeddings(embeddings[q], labels[q], embeddings[g], labels[g]))
    return average_trials(results)


def _check_compatible(state: dict, cfg: ExperimentConfig, test_index: D.DatasetIndex) -> None:
    saved = state["model_config"]
    current = asdict(model_config(cfg, saved["class_count"]))
    norm = lambda d: {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
    if norm(saved) != norm(current):
        diff = sorted(k for k in saved if norm(saved)[k] != norm(current).get(k))
        raise VersionError(f"checkpoint model config does not match experiment config: {', '.join(diff)}")


def evaluate(checkpoint: str | Path | dict, cfg: ExperimentConfig, out_dir: str | Path | None = None,
             test_index: D.DatasetIndex | None = None) -> EvalResult:
    """Evaluate a checkpoint under ``cfg.eval``; writes report files to ``out_dir``."""
    torch.set_num_threads(cfg.train.threads)
    state = checkpoint if isinstance(checkpoint, dict) else load_checkpoint(checkpoint)
    if test_index is None:
        test_index = build_datasets(cfg)[1]
    _check_compatible(state, cfg, test_index)
    enc = encoder_from_checkpoint(state)
    images = [r.load() for r in test_index.records]
    emb = extract_embeddings(enc, images)
    result = evaluate_encoder(enc, test_index, eval_protocol(cfg), emb)
    if out_dir is not None:
        dist = cosine_distribution(emb, [r.identity for r in test_index.records],
                                   [r.modality for r in test_index.records])
        write_report(result, Path(out_dir), dist, header=f"epoch {state['epoch']}, preset {cfg.preset}")
    return result


REPORT_RANKS = (1, 10, 20)


def write_report(result: EvalResult, out_dir: Path, dist=None, header: str = "") -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["retrieval report" + (f" ({header})" if header else ""), ""]
    rows = []
    trials = result.trials or [result]
    for t, r in enumerate(trials):
        rows.append([str(t)] + [repr(r.rank(k)) for k in REPORT_RANKS] + [repr(r.map)])
        lines.append(f"trial {t:2d}: " + "  ".join(f"R{k}={100 * r.rank(k):6.2f}" for k in REPORT_RANKS)
                     + f"  mAP={100 * r.map:6.2f}")
    rows.append(["mean"] + [repr(result.rank(k)) for k in REPORT_RANKS] + [repr(result.map)])
    lines += ["", "mean    : " + "  ".join(f"R{k}={100 * result.rank(k):6.2f}" for k in REPORT_RANKS)
              + f"  mAP={100 * result.map:6.2f}"]
    if result.skipped:
        lines.append(f"queries without a gallery match (skipped): {result.skipped}")
    (out_dir / "report.txt").write_text("\n".join(lines) + "\n")
    with open(out_dir / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial"] + [f"rank{k}" for k in REPORT_RANKS] + ["mAP"])
        w.writerows(rows)
    with open(out_dir / "cmc.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "cmc"])
        w.writerows([[i + 1, repr(float(v))] for i, v in enumerate(result.cmc)])
    if dist is not None:
        with open(out_dir / "cosine.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_left", "bin_right", "inter_modality_positive", "intra_modality_negative"])
            for i in range(len(dist.positive_hist)):
                w.writerow([repr(float(dist.edges[i])), repr(float(dist.edges[i + 1])),
                            int(dist.positive_hist[i]), int(dist.negative_hist[i])])
