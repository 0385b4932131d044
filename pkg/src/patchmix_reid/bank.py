"""Per-identity, per-modality feature centres and the centre-to-centre loss."""
from __future__ import annotations

import torch

from .errors import InputError
from .losses import LossWeights
from .patchmix import Modality

BANK_MODALITIES = (Modality.RGB, Modality.IR)


class CenterBank:
    """``Y x 2 x (1+P) x D`` running centres; slot 0 is global, 1..P are parts.

    ``update`` blends the batch means in with an EMA and keeps the blended
    tensor (``live``) attached to the current batch graph, so the loss
    gradient reaches the fresh features only; stored history is constant.
    """

    def __init__(self, identities: int, parts: int, dim: int, momentum: float = 0.1, start_epoch: int = 10,
                 dtype: torch.dtype = torch.float32):
        if not 0.0 < momentum <= 1.0:
            raise InputError(f"momentum must lie in (0, 1], got {momentum}")
        self.identities, self.parts, self.dim = identities, parts, dim
        self.momentum = momentum
        self.start_epoch = start_epoch
        self.centers = torch.zeros(identities, 2, 1 + parts, dim, dtype=dtype)
        self.initialized = torch.zeros(identities, 2, dtype=torch.bool)
        self.live: torch.Tensor | None = None

    def update(self, global_feats: torch.Tensor, part_feats: torch.Tensor | None, labels, modalities) -> "CenterBank":
        labels = torch.as_tensor(labels, dtype=torch.long)
        if labels.numel() and (labels.min() < 0 or labels.max() >= self.identities):
            raise InputError(f"identity labels must lie in [0, {self.identities})")
        mods = torch.tensor([BANK_MODALITIES.index(Modality(m)) for m in modalities], dtype=torch.long)
        if part_feats is None:
            part_feats = global_feats[:, None, :].expand(-1, self.parts, -1)
        feats = torch.cat([global_feats[:, None, :], part_feats], dim=1).to(self.centers.dtype)

        keys = labels * 2 + mods
        uniq = keys.unique()
        means = torch.stack([feats[keys == k].mean(dim=0) for k in uniq])
        ys, ms = uniq // 2, uniq % 2
        old = self.centers[ys, ms]
        seen = self.initialized[ys, ms][:, None, None]
        blended = torch.where(seen, (1.0 - self.momentum) * old + self.momentum * means, means)
        self.live = self.centers.index_put((ys, ms), blended)
        self.centers = self.live.detach().clone()
        self.initialized[ys, ms] = True
        return self

    def state_dict(self) -> dict:
        return {"centers": self.centers.clone(), "initialized": self.initialized.clone(),
                "momentum": self.momentum, "start_epoch": self.start_epoch}

    def load_state_dict(self, state: dict) -> None:
        self.centers = state["centers"].clone()
        self.initialized = state["initialized"].clone()
        self.momentum = state["momentum"]
        self.start_epoch = state["start_epoch"]
        self.identities, _, slots, self.dim = self.centers.shape
        self.parts = slots - 1
        self.live = None


def update_bank(bank: CenterBank, bundles, labels, modalities) -> CenterBank:
    return bank.update(bundles.global_feat, bundles.part_feats, labels, modalities)


def c2c_terms(bank: CenterBank) -> tuple[torch.Tensor, torch.Tensor]:
    """Unweighted (global, part) centre distances averaged over identities (and parts)."""
    c = bank.live if bank.live is not None else bank.centers
    diff = ((c[:, 0] - c[:, 1]) ** 2).sum(-1)             # Y x (1+P)
    return diff[:, 0].mean(), diff[:, 1:].mean()


def c2c_loss(bank: CenterBank, epoch: int, mu: float, w: LossWeights) -> torch.Tensor:
    if epoch < bank.start_epoch or not bool(bank.initialized.all()):
        return torch.zeros(())
    g, p = c2c_terms(bank)
    return w.lambda2 * g + mu * w.lambda3 * p
