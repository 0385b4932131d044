"""Two-stream encoder: modality-specific stems, a shared residual trunk with
part-wise attention, global/part pooling, a BN neck and identity classifiers."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, InputError, ShapeError
from .patchmix import Modality, ModalityImage

STEM_ORDER = (Modality.RGB, Modality.IR, Modality.MIX)


@dataclass(frozen=True)
class ModelConfig:
    class_count: int = 395
    part_count: int = 6
    stem_count: int = 3
    stem_width: int = 64
    stem_kernel: int = 3
    stem_stride: int = 2
    stem_pool: bool = True
    stage_widths: tuple[int, ...] = (256, 512, 1024, 2048)
    stage_depths: tuple[int, ...] = (2, 2, 2, 2)
    stage_strides: tuple[int, ...] = (1, 2, 2, 1)
    attention_after: tuple[int, ...] = (1, 2)
    attention_reduction: int = 16
    input_size: tuple[int, int] = (384, 192)

    def __post_init__(self):
        if self.part_count < 1:
            raise ConfigError("part_count must be >= 1")
        if self.class_count < 1:
            raise ConfigError("class_count must be >= 1")
        if self.stem_count not in (2, 3):
            raise ConfigError("stem_count must be 2 (RGB, IR) or 3 (RGB, IR, MIX)")
        if not (len(self.stage_widths) == len(self.stage_depths) == len(self.stage_strides)):
            raise ConfigError("stage widths, depths and strides must have equal length")
        if any(w <= 0 for w in self.stage_widths) or any(d < 1 for d in self.stage_depths):
            raise ConfigError("stage widths must be positive and depths >= 1")
        if any(not 0 <= i < len(self.stage_widths) for i in self.attention_after):
            raise ConfigError(f"attention_after indices out of range: {self.attention_after}")

    @property
    def feature_dim(self) -> int:
        return self.stage_widths[-1]

    def feature_map_sizes(self) -> list[tuple[int, int]]:
        """Spatial size after each trunk stage for ``input_size``."""
        h, w = self.input_size
        k, s, pad = self.stem_kernel, self.stem_stride, self.stem_kernel // 2
        h, w = (h + 2 * pad - k) // s + 1, (w + 2 * pad - k) // s + 1
        if self.stem_pool:
            h, w = _conv_out(h, 2), _conv_out(w, 2)
        sizes = []
        for s in self.stage_strides:
            h, w = _conv_out(h, s), _conv_out(w, s)
            sizes.append((h, w))
        return sizes


def _conv_out(n: int, stride: int) -> int:
    # 3x3 conv / pool with padding 1
    return (n - 1) // stride + 1


def check_part_height(height: int, parts: int) -> None:
    if height % parts:
        raise ShapeError(f"feature map height {height} is not divisible into {parts} parts")


def stripe_pool(fmap: torch.Tensor, parts: int) -> torch.Tensor:
    """``N x C x H x W`` -> ``N x P x C`` means over equal horizontal stripes."""
    n, c, h, w = fmap.shape
    check_part_height(h, parts)
    return fmap.reshape(n, c, parts, h // parts, w).mean(dim=(3, 4)).transpose(1, 2)


class PartAttention(nn.Module):
    """Rescale each horizontal stripe by a sigmoid gate from its pooled descriptor."""

    def __init__(self, channels: int, parts: int, reduction: int = 16):
        super().__init__()
        hidden = max(channels // reduction, 4)
        self.parts = parts
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def gates(self, fmap: torch.Tensor) -> torch.Tensor:
        desc = stripe_pool(fmap, self.parts)                       # N x P x C
        return torch.sigmoid(self.fc2(torch.relu(self.fc1(desc)))).squeeze(-1)  # N x P

    def forward(self, fmap: torch.Tensor) -> torch.Tensor:
        n, c, h, w = fmap.shape
        g = self.gates(fmap)
        return (fmap.reshape(n, c, self.parts, h // self.parts, w) * g[:, None, :, None, None]).reshape(n, c, h, w)


def part_attention(feature_map: np.ndarray | torch.Tensor, parts: int, module: PartAttention | None = None) -> torch.Tensor:
    """Functional form for a single ``C x H x W`` map."""
    fmap = torch.as_tensor(feature_map)
    check_part_height(fmap.shape[1], parts)
    module = module or PartAttention(fmap.shape[0], parts).to(fmap.dtype)
    return module(fmap[None])[0]


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Identity()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + self.shortcut(x))


def _stem(cfg: ModelConfig) -> nn.Sequential:
    k = cfg.stem_kernel
    layers = [nn.Conv2d(3, cfg.stem_width, k, cfg.stem_stride, k // 2, bias=False), nn.BatchNorm2d(cfg.stem_width), nn.ReLU(inplace=True)]
    if cfg.stem_pool:
        layers.append(nn.MaxPool2d(3, 2, 1))
    return nn.Sequential(*layers)


@dataclass
class FeatureBundle:
    """Per-sample outputs; ``part_feats`` is ``N x P x D`` and ``part_logits`` ``N x P x Y``."""

    global_feat: torch.Tensor
    part_feats: torch.Tensor
    embedding: torch.Tensor
    global_logits: torch.Tensor
    part_logits: torch.Tensor
    modalities: list[Modality] = field(default_factory=list)

    def __len__(self):
        return self.global_feat.shape[0]

    def __getitem__(self, idx) -> "FeatureBundle":
        if isinstance(idx, slice):
            mods = self.modalities[idx]
        else:
            idx = torch.as_tensor(idx)
            mods = [self.modalities[i] for i in idx.tolist()] if self.modalities else []
        return FeatureBundle(self.global_feat[idx], self.part_feats[idx], self.embedding[idx],
                             self.global_logits[idx], self.part_logits[idx], mods)


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.stems = nn.ModuleDict({m.value: _stem(cfg) for m in STEM_ORDER[:cfg.stem_count]})
        stages, attn = [], {}
        cin = cfg.stem_width
        for i, (w, d, s) in enumerate(zip(cfg.stage_widths, cfg.stage_depths, cfg.stage_strides)):
            blocks = [BasicBlock(cin, w, s)] + [BasicBlock(w, w, 1) for _ in range(d - 1)]
            stages.append(nn.Sequential(*blocks))
            if i in cfg.attention_after:
                attn[str(i)] = PartAttention(w, cfg.part_count, cfg.attention_reduction)
            cin = w
        self.stages = nn.ModuleList(stages)
        self.attention = nn.ModuleDict(attn)
        D, P, Y = cfg.feature_dim, cfg.part_count, cfg.class_count
        self.neck = nn.BatchNorm1d(D)
        self.neck.bias.requires_grad_(False)
        self.classifier = nn.Linear(D, Y, bias=False)
        self.part_necks = nn.ModuleList(nn.BatchNorm1d(D) for _ in range(P))
        self.part_classifiers = nn.ModuleList(nn.Linear(D, Y, bias=False) for _ in range(P))
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(m, nn.Linear) and m.out_features == Y:
                nn.init.normal_(m.weight, std=0.001)

    def shared_parameters(self):
        for name, p in self.named_parameters():
            if not name.startswith("stems."):
                yield p

    def trunk(self, x: torch.Tensor) -> torch.Tensor:
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if str(i) in self.attention:
                x = self.attention[str(i)](x)
        return x

    def head(self, fmap: torch.Tensor, modalities: list[Modality] | None = None) -> FeatureBundle:
        check_part_height(fmap.shape[2], self.cfg.part_count)
        g = fmap.mean(dim=(2, 3))
        parts = stripe_pool(fmap, self.cfg.part_count)
        emb = self.neck(g)
        part_logits = torch.stack(
            [clf(neck(parts[:, k])) for k, (neck, clf) in enumerate(zip(self.part_necks, self.part_classifiers))],
            dim=1,
        )
        return FeatureBundle(g, parts, emb, self.classifier(emb), part_logits, modalities or [])

    def forward(self, inputs: Sequence[tuple[Modality, torch.Tensor]]) -> FeatureBundle:
        """Route each ``(modality, N x 3 x H x W)`` chunk through its stem; the
        trunk and heads run once over the concatenation, in input order."""
        stemmed, mods = [], []
        for modality, x in inputs:
            key = getattr(modality, "value", modality)
            if key not in self.stems:
                raise InputError(f"no stem for modality {key!r}")
            stemmed.append(self.stems[key](x))
            mods += [Modality(modality)] * x.shape[0]
        return self.head(self.trunk(torch.cat(stemmed)), mods)

    def forward_images(self, images: Sequence[ModalityImage]) -> FeatureBundle:
        """Forward a mixed-modality list, returning bundles in list order."""
        groups: dict[Modality, list[int]] = {}
        for i, im in enumerate(images):
            groups.setdefault(im.modality, []).append(i)
        order = [i for idxs in groups.values() for i in idxs]
        bundle = self(
            [(m, images_to_tensor([images[i] for i in idxs])) for m, idxs in groups.items()]
        )
        inverse = torch.empty(len(order), dtype=torch.long)
        inverse[torch.tensor(order)] = torch.arange(len(order))
        return bundle[inverse]


def images_to_tensor(images: Sequence[ModalityImage]) -> torch.Tensor:
    arr = np.stack([im.pixels for im in images]).astype(np.float32, copy=False)
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def build_encoder(cfg: ModelConfig, seed: int = 0) -> Encoder:
    for i in cfg.attention_after:
        check_part_height(cfg.feature_map_sizes()[i][0], cfg.part_count)
    check_part_height(cfg.feature_map_sizes()[-1][0], cfg.part_count)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Encoder(cfg)


@torch.no_grad()
def extract_embeddings(enc: Encoder, images: Sequence[ModalityImage], batch_size: int = 128) -> np.ndarray:
    """BN-neck embeddings in evaluation mode (``len(images) x D``)."""
    was_training = enc.training
    enc.eval()
    try:
        out = [enc.forward_images(images[i:i + batch_size]).embedding for i in range(0, len(images), batch_size)]
    finally:
        enc.train(was_training)
    return torch.cat(out).numpy() if out else np.zeros((0, enc.cfg.feature_dim), dtype=np.float32)


def extract_embedding(enc: Encoder, img: ModalityImage) -> np.ndarray:
    return extract_embeddings(enc, [img])[0]
