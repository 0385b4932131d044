"""Patch-mixed intermediate modality and comparator generation strategies.

A patch-mixed image is stitched from a same-identity RGB/IR pair: the image is
cut into a regular grid of ``patch_height x patch_width`` blocks and each block
is copied verbatim from the RGB source with probability ``ratio_p`` and from the
IR source otherwise.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, PairingError, ShapeError


class Modality(str, enum.Enum):
    RGB = "RGB"
    IR = "IR"
    MIX = "MIX"


@dataclass(frozen=True)
class ModalityImage:
    """An ``H x W x 3`` pixel array tagged with modality, identity and camera.

    IR images are stored channel-replicated so every modality shares one shape.
    """

    pixels: np.ndarray
    modality: Modality
    identity: int
    camera: int = 0

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] <= 0 or px.shape[1] <= 0:
            raise ShapeError(f"expected H x W x 3 pixels, got shape {px.shape}")
        object.__setattr__(self, "modality", Modality(self.modality))

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]

    def with_pixels(self, pixels: np.ndarray, modality: Modality | None = None) -> "ModalityImage":
        return ModalityImage(pixels, modality or self.modality, self.identity, self.camera)


@dataclass(frozen=True)
class MixConfig:
    patch_height: int = 16
    patch_width: int = 16
    ratio_p: float = 0.1

    def __post_init__(self):
        if self.patch_height <= 0 or self.patch_width <= 0:
            raise ConfigError(f"patch size must be positive, got {self.patch_height}x{self.patch_width}")
        if not 0.0 <= self.ratio_p <= 1.0:
            raise ConfigError(f"ratio_p must lie in [0, 1], got {self.ratio_p}")

    def grid_dims(self, height: int, width: int) -> tuple[int, int]:
        """Patch-grid shape for an image, rejecting sizes the patch does not tile."""
        if height % self.patch_height or width % self.patch_width:
            raise ShapeError(
                f"image {height}x{width} is not divisible by patch "
                f"{self.patch_height}x{self.patch_width}"
            )
        return height // self.patch_height, width // self.patch_width


@dataclass(frozen=True)
class MixMask:
    """Boolean patch grid; ``True`` takes the RGB patch."""

    grid: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "grid", np.asarray(self.grid, dtype=bool))
        if self.grid.ndim != 2:
            raise ShapeError(f"mask grid must be 2-D, got shape {self.grid.shape}")

    @property
    def rgb_fraction(self) -> float:
        return float(self.grid.mean())

    def to_text(self) -> str:
        return "\n".join("".join("V" if c else "I" for c in row) for row in self.grid)


def sample_mix_mask(cfg: MixConfig, grid_dims: tuple[int, int], rng: np.random.Generator) -> MixMask:
    rows, cols = grid_dims
    if rows <= 0 or cols <= 0:
        raise ShapeError(f"grid dims must be positive, got {grid_dims}")
    return MixMask(rng.random((rows, cols)) < cfg.ratio_p)


def _check_pair(rgb: ModalityImage, ir: ModalityImage) -> None:
    if rgb.pixels.shape != ir.pixels.shape:
        raise ShapeError(f"paired images differ in shape: {rgb.pixels.shape} vs {ir.pixels.shape}")
    if rgb.identity != ir.identity:
        raise PairingError(f"paired images carry different identities: {rgb.identity} vs {ir.identity}")


def apply_patch_mix(rgb: ModalityImage, ir: ModalityImage, mask: MixMask, cfg: MixConfig) -> ModalityImage:
    _check_pair(rgb, ir)
    rows, cols = cfg.grid_dims(*rgb.shape)
    if mask.grid.shape != (rows, cols):
        raise ShapeError(f"mask shape {mask.grid.shape} does not match patch grid {(rows, cols)}")
    # upsample the grid to a pixel mask; np.where copies values untouched
    pixel_mask = np.repeat(np.repeat(mask.grid, cfg.patch_height, axis=0), cfg.patch_width, axis=1)
    mixed = np.where(pixel_mask[:, :, None], rgb.pixels, ir.pixels)
    return ModalityImage(mixed, Modality.MIX, rgb.identity, rgb.camera)


def patch_mix(rgb: ModalityImage, ir: ModalityImage, cfg: MixConfig, rng: np.random.Generator) -> tuple[ModalityImage, MixMask]:
    """Sample a fresh mask and stitch the pair."""
    mask = sample_mix_mask(cfg, cfg.grid_dims(*rgb.shape), rng)
    return apply_patch_mix(rgb, ir, mask, cfg), mask


# --- comparator strategies ---------------------------------------------------

class Strategy(str, enum.Enum):
    PATCHMIX = "patchmix"
    MIXUP = "mixup"
    CUTMIX = "cutmix"
    GRAYSCALE = "grayscale"
    RANDOM_ERASING = "random_erasing"


LUMA = np.array([0.299, 0.587, 0.114])


def mixup(rgb: ModalityImage, ir: ModalityImage, lam: float) -> ModalityImage:
    _check_pair(rgb, ir)
    px = lam * rgb.pixels + (1.0 - lam) * ir.pixels
    return ModalityImage(px.astype(rgb.pixels.dtype, copy=False), Modality.MIX, rgb.identity, rgb.camera)


def cutmix(rgb: ModalityImage, ir: ModalityImage, box: tuple[int, int, int, int]) -> ModalityImage:
    """Paste the ``(top, left, height, width)`` region of ``rgb`` into ``ir``."""
    _check_pair(rgb, ir)
    top, left, h, w = box
    px = ir.pixels.copy()
    px[top:top + h, left:left + w] = rgb.pixels[top:top + h, left:left + w]
    return ModalityImage(px, Modality.MIX, rgb.identity, rgb.camera)


def grayscale(img: ModalityImage) -> ModalityImage:
    gray = img.pixels @ LUMA.astype(img.pixels.dtype)
    px = np.repeat(gray[:, :, None], 3, axis=2)
    return img.with_pixels(px.astype(img.pixels.dtype, copy=False), Modality.MIX)


def random_erasing(img: ModalityImage, box: tuple[int, int, int, int], fill: float | np.ndarray = 0.0) -> ModalityImage:
    top, left, h, w = box
    px = img.pixels.copy()
    px[top:top + h, left:left + w] = fill
    return img.with_pixels(px, Modality.MIX)


def _random_box(height: int, width: int, area_frac: float, rng: np.random.Generator) -> tuple[int, int, int, int]:
    # square-ish box with the requested area fraction, clipped to the image
    h = int(round(height * np.sqrt(area_frac)))
    w = int(round(width * np.sqrt(area_frac)))
    h, w = max(1, min(h, height)), max(1, min(w, width))
    top = int(rng.integers(0, height - h + 1))
    left = int(rng.integers(0, width - w + 1))
    return top, left, h, w


def generate_comparator(
    strategy: Strategy | str,
    rgb: ModalityImage | None,
    ir: ModalityImage | None,
    params: dict | None,
    rng: np.random.Generator,
) -> ModalityImage:
    """Build an intermediate-modality image with a non-patch-mix strategy.

    ``params`` keys (all optional): ``alpha`` (Beta concentration) or ``lam``
    for mixup; ``box`` or ``area`` (fraction, sampled ~U(0,1) otherwise) for
    cutmix and random erasing; ``fill`` for random erasing. Grayscale and random
    erasing use ``rgb`` when present, else ``ir``.
    """
    try:
        strategy = Strategy(strategy)
    except ValueError:
        raise ConfigError(f"unsupported intermediate-modality strategy: {strategy!r}") from None
    params = params or {}

    if strategy is Strategy.MIXUP:
        lam = params.get("lam")
        if lam is None:
            alpha = params.get("alpha", 1.0)
            lam = float(rng.beta(alpha, alpha))
        return mixup(rgb, ir, lam)
    if strategy is Strategy.CUTMIX:
        h, w = rgb.shape
        box = params.get("box") or _random_box(h, w, params.get("area", rng.random()), rng)
        return cutmix(rgb, ir, box)
    if strategy is Strategy.PATCHMIX:
        cfg = params.get("config") or MixConfig()
        return patch_mix(rgb, ir, cfg, rng)[0]

    src = rgb if rgb is not None else ir
    if strategy is Strategy.GRAYSCALE:
        return grayscale(src)
    h, w = src.shape
    area = params.get("area")
    if area is None:
        area = rng.uniform(0.02, 0.4)
    box = params.get("box") or _random_box(h, w, area, rng)
    return random_erasing(src, box, params.get("fill", 0.0))
