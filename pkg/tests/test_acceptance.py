"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The directional experiments train the toy preset (16 identities, 96x48
images, 30 epochs) and take several minutes on one CPU core.
"""
import math
import time

import numpy as np
import pytest
import torch

from oracles import brute_evaluate, grads_close, random_retrieval_instance
from patchmix_reid.bank import CenterBank, c2c_loss
from patchmix_reid.evaluation import cmc_map, evaluate_embeddings
from patchmix_reid.losses import (LossWeights, MuSchedule, S2SProjector, hard_triplet_loss, id_loss, mu_schedule,
                                  pairwise_euclidean, part_align_loss, pmml_loss, s2s_loss)
from patchmix_reid.model import FeatureBundle
from patchmix_reid.patchmix import MixConfig, Modality, ModalityImage, patch_mix
from patchmix_reid.runner.config import SWITCHES_OFF, parse_config, with_overrides
from patchmix_reid.runner.schedule import LRSchedule, lr_schedule
from patchmix_reid.runner.train import build_datasets, eval_protocol, evaluate, evaluate_encoder, train

f64 = torch.float64
INSTANCES = 20
SEEDS = (0, 1, 2)
RGB, IR = Modality.RGB, Modality.IR


def report(criterion, name, ok, detail=""):
    criterion(name, ok, detail)
    print(f"[{'PASS' if ok else 'FAIL'}] {name}  {detail}")
    assert ok, f"{name}: {detail}"


# --- gradient oracle -------------------------------------------------------------

def _bundle(g, p):
    n, parts, _ = p.shape
    z = torch.zeros(n, 2, dtype=g.dtype)
    return FeatureBundle(z, torch.zeros(n, parts, 2, dtype=g.dtype), z, g, p)


def _triplet_instance(gen):
    """Random batch whose hardest positive/negative are unique and whose hinge
    is not within 1e-3 of its kink."""
    while True:
        n_ids, k = int(torch.randint(2, 4, (1,), generator=gen)), 2
        d = int(torch.randint(2, 8, (1,), generator=gen))
        x = torch.randn(n_ids * k, d, generator=gen, dtype=f64)
        labels = torch.arange(n_ids).repeat_interleave(k)
        dist = pairwise_euclidean(x)
        same = labels[:, None] == labels[None, :]
        ok = True
        for a in range(len(x)):
            pos = dist[a][same[a] & (torch.arange(len(x)) != a)].sort(descending=True).values
            neg = dist[a][~same[a]].sort().values
            gaps = [pos[0] - pos[1]] if len(pos) > 1 else []
            gaps += [neg[1] - neg[0]] if len(neg) > 1 else []
            if any(g < 1e-3 for g in gaps) or abs(pos[0] - neg[0] + 0.3) < 1e-3:
                ok = False
        if ok:
            return x, labels


def gradient_cases():
    gen = torch.Generator().manual_seed(2024)

    def rint(lo, hi):
        return int(torch.randint(lo, hi + 1, (1,), generator=gen))

    def cases_id():
        n, y = rint(1, 8), rint(2, 5)
        labels = torch.randint(0, y, (n,), generator=gen)
        return (lambda z: id_loss(z, labels)), torch.randn(n, y, generator=gen, dtype=f64)

    def cases_triplet():
        x, labels = _triplet_instance(gen)
        return (lambda z: hard_triplet_loss(z, labels, 0.3)), x

    def cases_s2s():
        n, d = rint(1, 8), rint(2, 8)
        torch.manual_seed(int(torch.randint(0, 2**31, (1,), generator=gen)))
        proj = S2SProjector(d).double()
        return (lambda z: s2s_loss(z[:, 0], z[:, 1], proj)), torch.randn(n, 2, d, generator=gen, dtype=f64)

    def cases_part_align():
        n, p, y = rint(1, 8), rint(1, 4), rint(2, 5)
        ref = torch.randn(n, y, generator=gen, dtype=f64)
        return (lambda z: part_align_loss(ref, z)), torch.randn(n, p, y, generator=gen, dtype=f64)

    def cases_pmml():
        n, p, y = rint(1, 8), rint(1, 4), rint(2, 5)
        bv = _bundle(torch.randn(n, y, generator=gen, dtype=f64), torch.randn(n, p, y, generator=gen, dtype=f64))
        bi = _bundle(torch.randn(n, y, generator=gen, dtype=f64), torch.randn(n, p, y, generator=gen, dtype=f64))
        w = float(torch.rand(1, generator=gen))
        return (lambda z: pmml_loss(bv, bi, _bundle(z[:, 0], z[:, 1:]), w)), \
            torch.randn(n, 1 + p, y, generator=gen, dtype=f64)

    def cases_c2c():
        y, p, d = rint(1, 3), rint(1, 3), rint(2, 6)
        prior = CenterBank(y, p, d, dtype=f64, start_epoch=0)
        prior.update(torch.randn(2 * y, d, generator=gen, dtype=f64), torch.randn(2 * y, p, d, generator=gen, dtype=f64),
                     list(range(y)) * 2, [RGB] * y + [IR] * y)
        state = prior.state_dict()
        labels = list(range(y)) * 2
        mods = [RGB] * y + [IR] * y
        mu = float(torch.rand(1, generator=gen))

        def fn(z):
            bank = CenterBank(y, p, d, dtype=f64)
            bank.load_state_dict(state)
            bank.update(z[:, 0], z[:, 1:], labels, mods)
            return c2c_loss(bank, 1, mu, LossWeights())

        return fn, torch.randn(2 * y, 1 + p, d, generator=gen, dtype=f64)

    return {"id": cases_id, "hard_triplet": cases_triplet, "s2s": cases_s2s, "part_align": cases_part_align,
            "pmml": cases_pmml, "c2c_batch": cases_c2c}


def test_gradient_oracle(criterion):
    t0 = time.time()
    failures = {}
    for name, make in gradient_cases().items():
        bad = sum(not grads_close(*make(), rtol=1e-4) for _ in range(INSTANCES))
        failures[name] = bad
    elapsed = time.time() - t0
    ok = all(v == 0 for v in failures.values()) and elapsed < 60
    report(criterion, "gradient oracle (6 losses x 20 instances, rtol 1e-4, < 1 min)", ok,
           f"failures {failures}, {elapsed:.1f}s")


# --- patch provenance ------------------------------------------------------------

def test_patch_provenance(criterion):
    t0 = time.time()
    draws, h, w, ph, pw = 1000, 96, 48, 8, 8
    rng = np.random.default_rng(11)
    details, ok = [], True
    for p in (0.1, 0.5, 0.9):
        cfg = MixConfig(ph, pw, p)
        rgb_patches = total = 0
        mismatches = 0
        for _ in range(draws):
            rgb = ModalityImage(rng.random((h, w, 3), dtype=np.float32), RGB, 1)
            ir = ModalityImage(np.repeat(rng.random((h, w, 1), dtype=np.float32), 3, axis=2), IR, 1)
            out, mask = patch_mix(rgb, ir, cfg, rng)
            for i, j in np.ndindex(mask.grid.shape):
                sl = np.s_[i * ph:(i + 1) * ph, j * pw:(j + 1) * pw]
                src = rgb if mask.grid[i, j] else ir
                mismatches += not np.array_equal(out.pixels[sl], src.pixels[sl])
            rgb_patches += int(mask.grid.sum())
            total += mask.grid.size
        frac = rgb_patches / total
        se = math.sqrt(p * (1 - p) / total)
        within = abs(frac - p) < 3 * se
        ok &= within and mismatches == 0
        details.append(f"p={p}: frac {frac:.4f} ({abs(frac - p) / se:.2f} SE), {mismatches} mismatched patches")
    elapsed = time.time() - t0
    ok &= elapsed < 60
    report(criterion, "patch provenance (1000 draws per p, 3 SE, < 1 min)", ok, "; ".join(details) + f"; {elapsed:.1f}s")


# --- metric oracle ---------------------------------------------------------------

def test_metric_oracle(criterion):
    rng = np.random.default_rng(5)
    worst = 0.0
    skipped_ok = True
    for _ in range(200):
        query, ql, gallery, gl = random_retrieval_instance(rng)
        res = evaluate_embeddings(query, ql, gallery, gl)
        cmc, mp, skipped = brute_evaluate(query, ql, gallery, gl)
        worst = max(worst, float(np.max(np.abs(res.cmc - cmc))), abs(res.map - mp))
        skipped_ok &= res.skipped == skipped
    hand = cmc_map(np.array([[0, 1, 2]]), [1], [0, 1, 1])
    hand_ok = abs(hand.map - (1 / 2 + 2 / 3) / 2) <= 1e-12 and hand.cmc.tolist() == [0, 1, 1]
    ok = worst <= 1e-12 and skipped_ok and hand_ok
    report(criterion, "metric oracle (200 instances, gallery <= 50, 1e-12)", ok,
           f"max deviation {worst:.2e}, hand AP {hand.map:.4f}")


# --- schedules -------------------------------------------------------------------

def test_schedule_anchors(criterion):
    mu = MuSchedule(0.5, 50, 101)
    lr = LRSchedule(0.1, 10, (30, 60, 90), 0.1, 101)
    mu_ok = (mu_schedule(0, mu), mu_schedule(50, mu), mu_schedule(101, mu)) == (0.0, 0.5, 0.5)
    lr_vals = tuple(lr_schedule(e, lr) for e in (10, 30, 45, 75, 95))
    lr_ok = lr_vals == (0.1, 0.1, 0.01, 0.001, 0.0001)
    defaults_ok = parse_config().optim.milestones == (30, 60, 90) and parse_config().train.epochs == 101
    report(criterion, "schedule anchors (exact equality)", mu_ok and lr_ok and defaults_ok,
           f"mu {mu_schedule(0, mu)},{mu_schedule(50, mu)},{mu_schedule(101, mu)}; lr {lr_vals}")


# --- degenerate zeros ------------------------------------------------------------

def test_degenerate_zeros(criterion):
    torch.manual_seed(0)
    f = torch.randn(6, 8, dtype=f64)
    vals = {"s2s": s2s_loss(f, f.clone(), S2SProjector(8).double()).item()}
    g = torch.randn(6, 5, dtype=f64)
    vals["part_align"] = part_align_loss(g, g[:, None].repeat(1, 3, 1)).item()
    b = _bundle(g, torch.randn(6, 3, 5, dtype=f64))
    vals["pmml"] = pmml_loss(b, b, b, 0.1).item()
    bank = CenterBank(3, 2, 4, dtype=f64, start_epoch=5)
    x, xp = torch.randn(3, 4, dtype=f64), torch.randn(3, 2, 4, dtype=f64)
    bank.update(torch.cat([x, x]), torch.cat([xp, xp]), [0, 1, 2] * 2, [RGB] * 3 + [IR] * 3)
    vals["c2c coinciding"] = c2c_loss(bank, 7, 0.5, LossWeights()).item()
    far = CenterBank(3, 2, 4, dtype=f64, start_epoch=5)
    far.update(torch.randn(6, 4, dtype=f64) * 10, None, [0, 1, 2] * 2, [RGB] * 3 + [IR] * 3)
    vals["c2c before start"] = c2c_loss(far, 4, 0.5, LossWeights()).item()
    ok = all(abs(v) <= 1e-9 for v in vals.values())
    report(criterion, "degenerate-zero suite (1e-9)", ok, ", ".join(f"{k}={v:.1e}" for k, v in vals.items()))


# --- directional experiments -----------------------------------------------------

BALANCED = {"data": {"synth": {"n_rgb": 8, "n_ir": 8}}}


class Runs:
    """Cache of (variant, seed) -> (rank1, mAP, seconds) shared by the directional tests."""

    def __init__(self):
        self.base = parse_config(preset="toy")
        self.results = {}

    def get(self, name, over, seed):
        key = (name, seed)
        if key not in self.results:
            cfg = with_overrides(self.base, {**over, "seed": seed})
            train_index, test_index = build_datasets(cfg)
            t0 = time.time()
            result = train(cfg, train_index=train_index)
            res = evaluate_encoder(result.encoder, test_index, eval_protocol(cfg))
            self.results[key] = (res.rank(1), res.map, time.time() - t0)
        return self.results[key]

    def rank1(self, name, over):
        return np.array([self.get(name, over, s)[0] for s in SEEDS])


@pytest.fixture(scope="module")
def runs():
    return Runs()


def _table(rows):
    return "; ".join(f"{k}: R1 {100 * v.mean():.2f} +- {100 * v.std(ddof=1):.2f}" for k, v in rows.items())


@pytest.mark.slow
def test_directional_ablation(criterion, runs):
    t0 = time.time()
    full = runs.rank1("p=0.1", {})
    base = runs.rank1("baseline", SWITCHES_OFF)
    elapsed = time.time() - t0
    gain = 100 * (full.mean() - base.mean())
    ok = gain >= 2.0 and elapsed < 15 * 60
    report(criterion, "directional ablation (full >= baseline + 2 Rank-1 points, 3 seeds, < 15 min)", ok,
           f"{_table({'full': full, 'baseline': base})}; gain {gain:+.2f}; {elapsed / 60:.1f} min")


@pytest.mark.slow
def test_directional_ratio_sweep(criterion, runs):
    imb = {f"p={p}": runs.rank1(f"p={p}", {"mix": {"ratio_p": p}} if p != 0.1 else {}) for p in (0.1, 0.3, 0.9)}
    best_low = max(imb["p=0.1"].mean(), imb["p=0.3"].mean())
    imbalanced_ok = best_low >= imb["p=0.9"].mean()

    bal = {f"p={p}": runs.rank1(f"bal p={p}", {**BALANCED, "mix": {"ratio_p": p}}) for p in (0.1, 0.5, 0.9)}
    best_name = max(bal, key=lambda k: bal[k].mean())
    # "within noise": gap to the best no larger than two standard errors of the difference of means
    se_diff = math.sqrt((bal[best_name].var(ddof=1) + bal["p=0.5"].var(ddof=1)) / len(SEEDS))
    gap = bal[best_name].mean() - bal["p=0.5"].mean()
    balanced_ok = gap <= 2 * se_diff
    report(criterion, "directional ratio sweep (imbalanced: best p in {0.1,0.3} >= p=0.9; balanced: p=0.5 within noise)",
           imbalanced_ok and balanced_ok,
           f"imbalanced [{_table(imb)}]; balanced [{_table(bal)}]; balanced gap {100 * gap:.2f} vs 2SE {200 * se_diff:.2f}")


def test_reproducibility(criterion, tmp_path):
    cfg = parse_config(preset="toy", overrides=["train.epochs=2", "mu.ramp_epochs=1", "bank.start_epoch=1",
                                                        "data.steps_per_epoch=4", "seed=7", "eval.trials=3"])
    finals, reports = [], []
    for k in range(2):
        out = tmp_path / f"run{k}"
        result = train(cfg, out)
        evaluate(result.checkpoint, cfg, out)
        finals.append(result.log.steps[-1]["losses"])
        reports.append((out / "report.txt").read_text() + (out / "results.csv").read_text())
    ok = finals[0] == finals[1] and reports[0] == reports[1]
    report(criterion, "reproducibility (identical final losses and reports)", ok,
           f"final total {result.log.steps[-1]['total']:.6f}")
