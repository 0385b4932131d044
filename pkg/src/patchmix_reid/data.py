"""Dataset indexing, synthetic paired-modality data, augmentation and PK sampling."""
from __future__ import annotations

import enum
import logging
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DatasetError, SamplingError
from .patchmix import Modality, ModalityImage

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}

# SYSU-MM01 camera convention: cams 1,2,4,5 are visible, 3,6 near-infrared.
SYSU_CAMERA_MODALITY = {1: Modality.RGB, 2: Modality.RGB, 3: Modality.IR,
                        4: Modality.RGB, 5: Modality.RGB, 6: Modality.IR}
SYSU_INDOOR_CAMERAS = (1, 2)


class Layout(str, enum.Enum):
    FLAT = "flat"
    SYSU_LIKE = "sysu"
    REGDB_LIKE = "regdb"


@dataclass
class Record:
    identity: int
    modality: Modality
    camera: int
    path: Path | None = None
    pixels: np.ndarray | None = field(default=None, repr=False)

    def load(self) -> ModalityImage:
        if self.pixels is not None:
            px = self.pixels
        else:
            px = read_image(self.path)
        return ModalityImage(px, self.modality, self.identity, self.camera)


@dataclass
class DatasetIndex:
    """Immutable list of records with identities densely relabeled ``0..Y-1``.

    ``raw_ids[y]`` keeps the original label of identity ``y``.
    """

    records: list[Record]
    raw_ids: list

    def __post_init__(self):
        groups: dict[tuple[int, Modality], list[int]] = defaultdict(list)
        for i, r in enumerate(self.records):
            groups[(r.identity, r.modality)].append(i)
        self._groups = dict(groups)

    @property
    def identity_count(self) -> int:
        return len(self.raw_ids)

    def count(self, modality: Modality) -> int:
        return sum(1 for r in self.records if r.modality is modality)

    def indices(self, identity: int, modality: Modality) -> list[int]:
        return self._groups.get((identity, modality), [])

    def select(self, modality: Modality, cameras: Iterable[int] | None = None) -> list[int]:
        cams = None if cameras is None else set(cameras)
        return [i for i, r in enumerate(self.records)
                if r.modality is modality and (cams is None or r.camera in cams)]

    def check_paired(self) -> None:
        for y, raw in enumerate(self.raw_ids):
            missing = [m.value for m in (Modality.RGB, Modality.IR) if not self.indices(y, m)]
            if missing:
                raise DatasetError(f"identity {raw} has no {'/'.join(missing)} images")

    @classmethod
    def from_raw(cls, items: Iterable[tuple], paired: bool = True) -> "DatasetIndex":
        """Build from ``(raw_identity, modality, camera, path_or_pixels)`` tuples."""
        items = list(items)
        if not items:
            raise DatasetError("no images found")
        raw_ids = sorted({it[0] for it in items}, key=_natural_key)
        relabel = {raw: y for y, raw in enumerate(raw_ids)}
        records = []
        for raw, modality, camera, src in items:
            if isinstance(src, np.ndarray):
                records.append(Record(relabel[raw], Modality(modality), int(camera), pixels=src))
            else:
                records.append(Record(relabel[raw], Modality(modality), int(camera), path=Path(src)))
        index = cls(records, raw_ids)
        if paired:
            index.check_paired()
        return index


def _natural_key(x):
    s = str(x)
    return (0, int(s), s) if s.isdigit() else (1, 0, s)


def read_image(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def write_image(path: Path, pixels: np.ndarray) -> None:
    from PIL import Image

    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.clip(np.rint(pixels * 255), 0, 255).astype(np.uint8)).save(path)


# --- on-disk layouts ---------------------------------------------------------

_CAM_RE = re.compile(r"c(\d+)[_.\-]")


def _images(folder: Path) -> list[Path]:
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_dataset(root: str | Path, layout: Layout | str = Layout.FLAT, paired: bool = True) -> DatasetIndex:
    """Index a dataset directory.

    FLAT:  ``<root>/<identity>/<RGB|IR>/<images>``; a ``c<k>_`` filename prefix
           sets the camera, otherwise RGB=1 and IR=2.
    SYSU:  ``<root>/cam<k>/<identity>/<images>`` with the fixed SYSU camera table.
    REGDB: ``<root>/visible.txt`` and ``<root>/thermal.txt``, one ``path label``
           per line, paths relative to ``root``.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    layout = Layout(layout)
    items = []
    if layout is Layout.FLAT:
        for id_dir in sorted(p for p in root.iterdir() if p.is_dir()):
            for modality in (Modality.RGB, Modality.IR):
                mdir = id_dir / modality.value
                if not mdir.is_dir():
                    continue
                default_cam = 1 if modality is Modality.RGB else 2
                for img in _images(mdir):
                    m = _CAM_RE.match(img.name)
                    cam = int(m.group(1)) if m else default_cam
                    items.append((id_dir.name, modality, cam, img))
    elif layout is Layout.SYSU_LIKE:
        for cam_dir in sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith("cam")):
            cam = int(cam_dir.name[3:])
            if cam not in SYSU_CAMERA_MODALITY:
                raise DatasetError(f"unknown SYSU camera folder {cam_dir.name}")
            for id_dir in sorted(p for p in cam_dir.iterdir() if p.is_dir()):
                for img in _images(id_dir):
                    items.append((id_dir.name, SYSU_CAMERA_MODALITY[cam], cam, img))
    else:
        for fname, modality, cam in (("visible.txt", Modality.RGB, 1), ("thermal.txt", Modality.IR, 2)):
            listing = root / fname
            if not listing.exists():
                raise DatasetError(f"missing index file {listing}")
            for line in listing.read_text().splitlines():
                if line.strip():
                    rel, label = line.rsplit(maxsplit=1)
                    items.append((label, modality, cam, root / rel))
    if not items:
        raise FileNotFoundError(f"no images under {root}")
    return DatasetIndex.from_raw(items, paired=paired)


def materialize_flat(index: DatasetIndex, root: str | Path) -> None:
    """Write an index (typically synthetic) to disk in FLAT layout."""
    root = Path(root)
    counters: dict = defaultdict(int)
    for r in index.records:
        key = (r.identity, r.modality)
        n = counters[key]
        counters[key] += 1
        raw = index.raw_ids[r.identity]
        name = f"{raw:04d}" if isinstance(raw, int) else str(raw)
        write_image(root / name / r.modality.value / f"c{r.camera}_{n:04d}.png", r.load().pixels)


# --- synthetic data ----------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Procedural paired-modality dataset description.

    ``noise`` scales every nuisance factor (pixel noise, placement jitter,
    brightness, camera tint); at ``noise=0`` all images of one identity and
    modality are identical.
    """

    identities: int = 16
    n_rgb: int = 12
    n_ir: int = 4
    height: int = 96
    width: int = 48
    noise: float = 1.0
    bands: int = 6

    def __post_init__(self):
        if self.identities < 2:
            raise DatasetError("synthetic dataset needs at least 2 identities")
        if self.n_rgb < 1 or self.n_ir < 1:
            raise DatasetError("need at least one image per modality per identity")


@dataclass(frozen=True)
class _Appearance:
    cuts: np.ndarray         # band boundaries, rows as fractions of height
    colors: np.ndarray       # bands x 3  RGB
    thermal: np.ndarray      # bands      IR intensity
    widths: np.ndarray       # bands      silhouette half-width as fraction of width
    freq: np.ndarray         # bands      texture stripe frequency (0 = plain)
    vertical: np.ndarray     # bands      stripe orientation flag


_RGB_CAMERAS = (1, 2, 4, 5)
_IR_CAMERAS = (3, 6)
# fixed non-luminance mapping from surface colour to emitted IR intensity
_THERMAL_W = np.array([0.55, -0.35, 0.45])


def _draw_appearance(bands: int, rng: np.random.Generator) -> _Appearance:
    inner = np.sort(rng.uniform(0.12, 0.95, size=bands - 1))
    cuts = np.concatenate([[0.0], inner, [1.0]])
    colors = rng.uniform(0.05, 0.95, size=(bands, 3))
    # IR intensity: nonlinear remap of colour plus an identity-specific
    # component so IR is not a deterministic function of RGB colour
    t = colors @ _THERMAL_W + 0.35 * rng.uniform(-1, 1, size=bands)
    thermal = 1.0 / (1.0 + np.exp(-4.0 * (t - 0.25)))
    widths = rng.uniform(0.18, 0.45, size=bands)
    freq = np.where(rng.random(bands) < 0.5, 0.0, rng.uniform(0.25, 0.9, size=bands))
    vertical = rng.random(bands) < 0.5
    return _Appearance(cuts, colors, thermal, widths, freq, vertical)


def _render(app: _Appearance, modality: Modality, camera: int, spec: SynthSpec,
            rng: np.random.Generator) -> np.ndarray:
    H, W, s = spec.height, spec.width, spec.noise
    shift_y = rng.uniform(-0.04, 0.04) * H * s
    shift_x = rng.uniform(-0.08, 0.08) * W * s
    scale = 1.0 + rng.uniform(-0.08, 0.08) * s
    yy, xx = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    v = (yy - shift_y) / (H * scale)
    u = (xx - W / 2 - shift_x) / W
    band = np.clip(np.searchsorted(app.cuts, v, side="right") - 1, 0, spec.bands - 1)
    inside = (v >= 0) & (v < 1) & (np.abs(u) < app.widths[band])
    coord = np.where(app.vertical[band], xx, yy).astype(float)
    texture = np.where(app.freq[band] > 0, 0.5 + 0.5 * np.sign(np.sin(coord * app.freq[band] * np.pi)), 1.0)

    cam_rng = np.random.default_rng(1000 + camera)
    if modality is Modality.RGB:
        tint = 1.0 + s * cam_rng.uniform(-0.15, 0.15, size=3)
        fg = app.colors[band] * (0.7 + 0.3 * texture[..., None]) * tint
        bg = (0.35 + s * cam_rng.uniform(-0.1, 0.1, size=3)) + 0.1 * s * rng.uniform(-1, 1, size=3)
        img = np.where(inside[..., None], fg, bg)
    else:
        gain = 1.0 + s * cam_rng.uniform(-0.1, 0.1)
        fg = app.thermal[band] * (0.85 + 0.15 * texture) * gain
        bg = 0.15 + 0.05 * s * rng.uniform(-1, 1)
        gray = np.where(inside, fg, bg)
        img = np.repeat(gray[..., None], 3, axis=2)
    img = img * (1.0 + rng.uniform(-0.15, 0.15) * s)
    if s > 0:
        noise = rng.normal(0.0, 0.06 * s, size=(H, W, 1 if modality is Modality.IR else 3))
        img = img + noise
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_dataset(spec: SynthSpec, rng: np.random.Generator, label_offset: int = 0) -> DatasetIndex:
    """Render ``spec.identities`` procedural identities in both modalities.

    Each identity is a stack of coloured, optionally striped body bands; the IR
    rendering keeps the layout and texture but replaces colour with a
    remapped intensity, so identity survives across modalities while the two
    pixel distributions differ.
    """
    items = []
    for y in range(spec.identities):
        app = _draw_appearance(spec.bands, rng)
        raw = label_offset + y
        for n in range(spec.n_rgb):
            cam = _RGB_CAMERAS[n % len(_RGB_CAMERAS)]
            items.append((raw, Modality.RGB, cam, _render(app, Modality.RGB, cam, spec, rng)))
        for n in range(spec.n_ir):
            cam = _IR_CAMERAS[n % len(_IR_CAMERAS)]
            items.append((raw, Modality.IR, cam, _render(app, Modality.IR, cam, spec, rng)))
    return DatasetIndex.from_raw(items)


# --- augmentation ------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    target_size: tuple[int, int] = (384, 192)
    hflip_prob: float = 0.5
    channel_erase_prob: float = 0.5

    def __post_init__(self):
        for name in ("hflip_prob", "channel_erase_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")


def resize(pixels: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if pixels.shape[:2] == tuple(size):
        return pixels
    t = torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float32)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False, antialias=True)
    return out[0].permute(1, 2, 0).numpy()


def hflip(pixels: np.ndarray) -> np.ndarray:
    return pixels[:, ::-1].copy()


def channel_erase(pixels: np.ndarray, channel: int) -> np.ndarray:
    """Replicate one colour channel over all three."""
    return np.repeat(pixels[:, :, channel:channel + 1], 3, axis=2)


def augment(img: ModalityImage, cfg: AugmentConfig, rng: np.random.Generator) -> ModalityImage:
    px = resize(img.pixels, cfg.target_size)
    if rng.random() < cfg.hflip_prob:
        px = hflip(px)
    if img.modality is Modality.RGB and rng.random() < cfg.channel_erase_prob:
        px = channel_erase(px, int(rng.integers(3)))
    return img.with_pixels(px)


# --- PK sampling -------------------------------------------------------------

@dataclass(frozen=True)
class PKConfig:
    identities_per_batch: int = 4
    images_per_identity_per_modality: int = 4

    def __post_init__(self):
        if self.identities_per_batch < 1 or self.images_per_identity_per_modality < 1:
            raise ValueError("PK sampler sizes must be positive")

    @property
    def batch_size(self) -> int:
        return 2 * self.identities_per_batch * self.images_per_identity_per_modality


@dataclass
class Batch:
    rgb: list[ModalityImage]
    ir: list[ModalityImage]

    @property
    def labels(self) -> np.ndarray:
        return np.array([im.identity for im in self.rgb])


def _pick(pool: Sequence[int], k: int, rng: np.random.Generator) -> list[int]:
    replace = len(pool) < k
    return [pool[i] for i in rng.choice(len(pool), size=k, replace=replace)]


def sample_batch(index: DatasetIndex, cfg: PKConfig, rng: np.random.Generator) -> Batch:
    """Draw the same identities for both modalities, position-aligned.

    Identities with fewer than ``K`` images in a modality are sampled with
    replacement.
    """
    Y = index.identity_count
    if Y < cfg.identities_per_batch:
        raise SamplingError(f"need {cfg.identities_per_batch} identities per batch, index has {Y}")
    ids = rng.choice(Y, size=cfg.identities_per_batch, replace=False)
    K = cfg.images_per_identity_per_modality
    rgb, ir = [], []
    for y in ids:
        pools = [index.indices(int(y), m) for m in (Modality.RGB, Modality.IR)]
        if not pools[0] or not pools[1]:
            raise SamplingError(f"identity {index.raw_ids[y]} is missing a modality")
        rgb += [index.records[i].load() for i in _pick(pools[0], K, rng)]
        ir += [index.records[i].load() for i in _pick(pools[1], K, rng)]
    return Batch(rgb, ir)
