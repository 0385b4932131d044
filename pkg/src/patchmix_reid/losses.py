"""Training objectives: identity, hard triplet, sample-to-sample, part
alignment, patch-mixed modality alignment, their composition, and the
part-loss weight schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import torch
import torch.nn.functional as F
from torch import nn

from .errors import InputError, NumericError, PairingError, ShapeError

LOSS_KEYS = ("id_g", "tri", "s2s_g", "id_p", "s2s_p", "part_align", "c2c_g", "c2c_p", "pmml")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.2
    lambda2: float = 0.2
    lambda3: float = 1.0
    triplet_margin: float = 0.3
    p: float = 0.1

    def __post_init__(self):
        vals = (self.lambda1, self.lambda2, self.lambda3, self.triplet_margin, self.p)
        if not all(math.isfinite(v) for v in vals):
            raise InputError(f"loss weights must be finite: {self}")
        if self.triplet_margin < 0:
            raise InputError("triplet margin must be >= 0")
        if not 0.0 <= self.p <= 1.0:
            raise InputError("p must lie in [0, 1]")


@dataclass(frozen=True)
class MuSchedule:
    max_value: float = 0.5
    ramp_epochs: int = 50
    total_epochs: int = 101

    def __post_init__(self):
        if not 0 <= self.ramp_epochs <= self.total_epochs:
            raise InputError("need 0 <= ramp_epochs <= total_epochs")


def mu_schedule(epoch: float, sched: MuSchedule = MuSchedule()) -> float:
    if not 0 <= epoch <= sched.total_epochs:
        raise InputError(f"epoch {epoch} outside [0, {sched.total_epochs}]")
    if sched.ramp_epochs == 0 or epoch >= sched.ramp_epochs:
        return sched.max_value
    return sched.max_value * epoch / sched.ramp_epochs


def id_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise InputError(f"labels must lie in [0, {logits.shape[1]})")
    return F.cross_entropy(logits, labels)


def pairwise_euclidean(x: torch.Tensor) -> torch.Tensor:
    d2 = ((x[:, None, :] - x[None, :, :]) ** 2).sum(-1)
    return d2.clamp_min(1e-12).sqrt()


def hard_triplet_loss(embeddings: torch.Tensor, labels: torch.Tensor, margin: float = 0.3) -> torch.Tensor:
    """Batch-hard triplet loss: per anchor, farthest positive vs nearest negative."""
    labels = torch.as_tensor(labels)
    uniq, counts = labels.unique(return_counts=True)
    if len(uniq) < 2 or counts.min() < 2:
        raise InputError("hard triplet mining needs >= 2 labels, each appearing >= 2 times")
    dist = pairwise_euclidean(embeddings)
    same = labels[:, None] == labels[None, :]
    d_ap = dist.masked_fill(~same, float("-inf")).max(dim=1).values
    d_an = dist.masked_fill(same, float("inf")).min(dim=1).values
    return torch.relu(d_ap - d_an + margin).mean()


class S2SProjector(nn.Module):
    """Two fully-connected layers with a ReLU between; ``D -> D``."""

    def __init__(self, dim: int, hidden: int | None = None):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden or dim)
        self.fc2 = nn.Linear(hidden or dim, dim)

    def forward(self, x):
        return self.fc2(torch.relu(self.fc1(x)))


def s2s_loss(feats_v: torch.Tensor, feats_i: torch.Tensor, proj: nn.Module) -> torch.Tensor:
    """Mean over identity-paired rows of the mean squared projected difference."""
    if feats_v.shape != feats_i.shape:
        raise PairingError(f"paired features differ in shape: {tuple(feats_v.shape)} vs {tuple(feats_i.shape)}")
    return ((proj(feats_v) - proj(feats_i)) ** 2).mean(dim=-1).mean()


def kl_to_reference(ref_logits: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """``KL(softmax(ref) || softmax(logits))`` summed over heads, averaged over
    samples (dim 0); ``ref`` carries no gradient."""
    ref_logp = F.log_softmax(ref_logits.detach(), dim=-1)
    kl = (ref_logp.exp() * (ref_logp - F.log_softmax(logits, dim=-1))).sum(dim=-1)
    return kl.reshape(kl.shape[0], -1).sum(dim=1).mean()


def part_align_loss(global_logits: torch.Tensor, part_logits: torch.Tensor) -> torch.Tensor:
    """KL(global prediction || part prediction), summed over parts and
    averaged over samples.

    ``global_logits`` is ``N x Y``; ``part_logits`` is ``N x P x Y``.
    """
    if part_logits.ndim != 3 or part_logits.shape[0] != global_logits.shape[0] or part_logits.shape[2] != global_logits.shape[1]:
        raise ShapeError(f"incompatible shapes {tuple(global_logits.shape)} and {tuple(part_logits.shape)}")
    return kl_to_reference(global_logits[:, None, :].expand_as(part_logits), part_logits)


def pmml_terms(bundle_x, bundle_m) -> torch.Tensor:
    """Alignment of mixed-modality predictions to one original modality.

    Global head to global head plus each part head to the same part head,
    averaged over aligned samples; the original modality is the reference.
    """
    if bundle_x.global_logits.shape != bundle_m.global_logits.shape or bundle_x.part_logits.shape != bundle_m.part_logits.shape:
        raise PairingError("mixed and original bundles are not aligned")
    return (kl_to_reference(bundle_x.global_logits, bundle_m.global_logits)
            + kl_to_reference(bundle_x.part_logits, bundle_m.part_logits))


def pmml_loss(bundles_v, bundles_i, bundles_m, p: float) -> torch.Tensor:
    if not (len(bundles_v) == len(bundles_i) == len(bundles_m)):
        raise PairingError("rgb, ir and mixed bundles must be triple-aligned")
    return p * pmml_terms(bundles_v, bundles_m) + (1.0 - p) * pmml_terms(bundles_i, bundles_m)


def total_loss(components: Mapping[str, torch.Tensor | float], w: LossWeights, mu: float) -> torch.Tensor | float:
    """Compose the objective.

    ``components`` may omit disabled terms. ``c2c`` is the already-weighted
    centre loss; if absent it is rebuilt from ``c2c_g`` and ``c2c_p``.
    """
    for name, value in components.items():
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise NumericError(f"non-finite loss component {name!r}: {v}")

    def c(name):
        return components.get(name, 0.0)

    base_global = c("id_g") + c("tri") + w.lambda1 * c("s2s_g")
    base = base_global + mu * (c("id_p") + c("s2s_p") + c("part_align"))
    if "c2c" in components:
        c2c = components["c2c"]
    else:
        c2c = w.lambda2 * c("c2c_g") + mu * w.lambda3 * c("c2c_p")
    return base + c2c + mu * c("pmml")
