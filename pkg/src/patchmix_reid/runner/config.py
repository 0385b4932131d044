"""Experiment configuration: nested dataclasses, named presets, YAML files and
``key=value`` overrides."""
from __future__ import annotations

import copy
import dataclasses
import types
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Union

import yaml

from ..errors import ConfigError


@dataclass
class SynthSection:
    identities: int = 16
    n_rgb: int = 12
    n_ir: int = 4
    test_identities: int = 16
    test_n_rgb: int = 8
    test_n_ir: int = 4
    noise: float = 1.0


@dataclass
class DataSection:
    source: str = "synthetic"            # synthetic | path
    path: str | None = None              # root holding train/ and test/
    layout: str = "flat"                 # flat | sysu | regdb
    synth: SynthSection = field(default_factory=SynthSection)
    image_height: int = 384
    image_width: int = 192
    hflip_prob: float = 0.5
    channel_erase_prob: float = 0.5
    identities_per_batch: int = 4
    images_per_identity: int = 4
    steps_per_epoch: int | None = None


@dataclass
class ModelSection:
    part_count: int = 6
    stem_count: int = 3
    stem_width: int = 64
    stem_kernel: int = 3
    stem_stride: int = 2
    stem_pool: bool = True
    stage_widths: tuple[int, ...] = (64, 128, 256, 512)
    stage_depths: tuple[int, ...] = (2, 2, 2, 2)
    stage_strides: tuple[int, ...] = (1, 2, 2, 1)
    attention_after: tuple[int, ...] = (1, 2)
    attention_reduction: int = 16


@dataclass
class MixSection:
    strategy: str = "patchmix"           # patchmix | mixup | cutmix | grayscale | random_erasing
    patch_height: int = 16
    patch_width: int = 16
    ratio_p: float = 0.1
    mixup_alpha: float = 1.0


@dataclass
class LossSection:
    lambda1: float = 0.2
    lambda2: float = 0.2
    lambda3: float = 1.0
    triplet_margin: float = 0.3


@dataclass
class MuSection:
    max_value: float = 0.5
    ramp_epochs: int = 50


@dataclass
class BankSection:
    momentum: float = 0.1
    start_epoch: int = 10


@dataclass
class OptimSection:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    warmup_epochs: int = 10
    milestones: tuple[int, ...] = (30, 60, 90)
    gamma: float = 0.1


@dataclass
class TrainSection:
    epochs: int = 101
    eval_every: int = 0                  # 0: evaluate only at the end
    threads: int = 1


@dataclass
class EvalSection:
    query: str = "IR"
    gallery: str = "RGB"
    shots: int = 1
    gallery_cameras: tuple[int, ...] | None = None
    trials: int = 10
    seed: int = 0


@dataclass
class EnableSection:
    part: bool = True
    part_align: bool = True
    c2c: bool = True
    patchmix: bool = True
    pmml: bool = True


@dataclass
class ExperimentConfig:
    preset: str = "paper"
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    mix: MixSection = field(default_factory=MixSection)
    loss: LossSection = field(default_factory=LossSection)
    mu: MuSection = field(default_factory=MuSection)
    bank: BankSection = field(default_factory=BankSection)
    optim: OptimSection = field(default_factory=OptimSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    enable: EnableSection = field(default_factory=EnableSection)

    def validate(self) -> "ExperimentConfig":
        d, m = self.data, self.mix
        if d.image_height % m.patch_height or d.image_width % m.patch_width:
            raise ConfigError(
                f"image {d.image_height}x{d.image_width} not divisible by patch {m.patch_height}x{m.patch_width}")
        if not 0.0 <= m.ratio_p <= 1.0:
            raise ConfigError("mix.ratio_p must lie in [0, 1]")
        if self.mu.ramp_epochs > self.train.epochs:
            raise ConfigError("mu.ramp_epochs exceeds train.epochs")
        if self.enable.pmml and not self.enable.patchmix:
            raise ConfigError("enable.pmml requires enable.patchmix (pmml aligns the mixed modality)")
        if d.source not in ("synthetic", "path"):
            raise ConfigError(f"data.source must be 'synthetic' or 'path', got {d.source!r}")
        if d.source == "path" and not d.path:
            raise ConfigError("data.path is required when data.source is 'path'")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


SWITCHES_OFF = {"enable": {k: False for k in ("part", "part_align", "c2c", "patchmix", "pmml")}}

PRESETS: dict[str, dict] = {
    "paper": {},
    # desk-scale profile used by the acceptance suite
    "toy": {
        "data": {"image_height": 96, "image_width": 48, "channel_erase_prob": 0.5,
                 "synth": {"identities": 16, "n_rgb": 12, "n_ir": 4}},
        "model": {"part_count": 6, "stem_width": 16, "stem_kernel": 5, "stem_stride": 4,
                  "stem_pool": False, "stage_widths": [16, 24, 32, 48], "stage_depths": [1, 1, 1, 1],
                  "stage_strides": [1, 2, 1, 1],
                  "attention_reduction": 8},
        "mix": {"patch_height": 8, "patch_width": 8},
        "mu": {"ramp_epochs": 15},
        "bank": {"start_epoch": 5},
        "optim": {"warmup_epochs": 3, "milestones": [20, 26]},
        "train": {"epochs": 30},
    },
}


# --- merging and validation ---------------------------------------------------

def _deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def _unknown_keys(cls, data: dict, prefix: str = "") -> list[str]:
    hints = typing.get_type_hints(cls)
    bad = []
    for k, v in data.items():
        path = f"{prefix}{k}"
        if k not in hints:
            bad.append(path)
        elif is_dataclass(hints[k]) and isinstance(v, dict):
            bad += _unknown_keys(hints[k], v, path + ".")
    return bad


def _coerce(value: Any, hint: Any, path: str) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping, got {type(value).__name__}")
        return _build(hint, value, path + ".")
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        elem = args[0]
        return tuple(_coerce(v, elem, f"{path}[{i}]") for i, v in enumerate(value))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected bool, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected int, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected float, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected str, got {value!r}")
        return value
    return value


def _build(cls, data: dict, prefix: str = ""):
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in fields(cls):
        if f.name in data:
            kwargs[f.name] = _coerce(data[f.name], hints[f.name], prefix + f.name)
    return cls(**kwargs)


def parse_override(text: str) -> dict:
    """``"a.b.c=value"`` -> ``{"a": {"b": {"c": value}}}`` with YAML-typed value."""
    if "=" not in text:
        raise ConfigError(f"override must look like key=value: {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {key}: cannot parse value {raw!r}") from exc
    node: dict = {}
    out = node
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node[p] = {}
        node = node[p]
    node[parts[-1]] = value
    return out


def load_yaml(path: str | Path) -> dict:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"cannot parse {path}{where}: {getattr(exc, 'problem', exc)}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def parse_config(path: str | Path | None = None, overrides: list[str] | dict | None = None,
                 preset: str | None = None) -> ExperimentConfig:
    """Resolve defaults <- preset <- file <- overrides."""
    file_data = load_yaml(path) if path else {}
    if isinstance(overrides, dict):
        over = overrides
    else:
        over = {}
        for item in overrides or []:
            over = _deep_merge(over, parse_override(item))
    name = over.get("preset") or preset or file_data.get("preset") or "paper"
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    merged = _deep_merge(_deep_merge(PRESETS[name], file_data), over)
    merged["preset"] = name
    bad = _unknown_keys(ExperimentConfig, merged)
    if bad:
        raise ConfigError(f"unknown config keys: {', '.join(bad)}")
    return _build(ExperimentConfig, merged).validate()


def with_overrides(cfg: ExperimentConfig, overrides: dict | list[str]) -> ExperimentConfig:
    if not isinstance(overrides, dict):
        merged: dict = {}
        for item in overrides:
            merged = _deep_merge(merged, parse_override(item))
        overrides = merged
    data = _deep_merge(cfg.to_dict(), overrides)
    bad = _unknown_keys(ExperimentConfig, data)
    if bad:
        raise ConfigError(f"unknown config keys: {', '.join(bad)}")
    return _build(ExperimentConfig, data).validate()


def get_path(cfg: ExperimentConfig, dotted: str) -> Any:
    node: Any = cfg
    for part in dotted.split("."):
        if not dataclasses.is_dataclass(node) or not hasattr(node, part):
            raise ConfigError(f"unknown config path {dotted!r}")
        node = getattr(node, part)
    return node


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    def plain(x):
        if isinstance(x, tuple):
            return [plain(v) for v in x]
        if isinstance(x, dict):
            return {k: plain(v) for k, v in x.items()}
        return x

    Path(path).write_text(yaml.safe_dump(plain(cfg.to_dict()), sort_keys=False))
