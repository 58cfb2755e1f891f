"""
Samples, the synthetic fire-scene generator, dataset splitting and resizing.
"""
from dataclasses import dataclass, replace
from typing import List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.errors import FractionSumError, MaskValueError, ShapeMismatchError
from src.network.functional import bilinear_matrix

DEFAULT_SPLIT = (0.70, 0.15, 0.15)


@dataclass(frozen=True)
class Sample:
    """One RGB image (3 x H x W, values in [0, 1]) with its binary fire mask (H x W)."""

    image: np.ndarray
    mask: np.ndarray
    id: str = ""

    def __post_init__(self):
        image = np.asarray(self.image, dtype=np.float32)
        mask = np.asarray(self.mask, dtype=np.uint8)
        if image.ndim != 3 or image.shape[0] != 3:
            raise ShapeMismatchError(f"image must be 3 x H x W, got {image.shape}")
        if mask.shape != image.shape[1:]:
            raise ShapeMismatchError(f"mask {mask.shape} does not match image {image.shape[1:]}")
        if not np.isfinite(image).all():
            raise ValueError(f"sample '{self.id}' has non-finite pixels")
        if mask.size and mask.max() > 1:
            raise MaskValueError(f"sample '{self.id}' mask holds values other than 0 and 1")
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "mask", mask)

    @property
    def size(self) -> Tuple[int, int]:
        return self.mask.shape


class SynthConfig(BaseModel):
    """Synthetic scene parameters; output is a pure function of these fields."""

    model_config = ConfigDict(frozen=True)

    count: int = Field(default=64, ge=0)
    size: int = Field(default=64, ge=16)
    min_blobs: int = Field(default=0, ge=0)
    max_blobs: int = Field(default=4, ge=0, le=4)
    seed: int = 0
    noise: float = Field(default=0.05, ge=0.0, le=0.5)
    radius_range: Tuple[float, float] = (0.08, 0.22)

    @model_validator(mode="after")
    def _ordered(self):
        if self.min_blobs > self.max_blobs:
            raise ValueError(f"min_blobs {self.min_blobs} exceeds max_blobs {self.max_blobs}")
        lo, hi = self.radius_range
        if not 0.0 < lo <= hi <= 0.5:
            raise ValueError(f"radius_range must satisfy 0 < lo <= hi <= 0.5, got {self.radius_range}")
        return self


def _smooth_field(rng: np.random.Generator, size: int, coarse: int, channels: int) -> np.ndarray:
    grid = rng.random((channels, coarse, coarse))
    a = bilinear_matrix(size, coarse).astype(np.float64)
    return np.einsum("ij,cjk,lk->cil", a, grid, a)


def _render_scene(cfg: SynthConfig, index: int) -> Sample:
    rng = np.random.default_rng([cfg.seed, index])
    n = cfg.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5

    vegetation = np.array([0.22, 0.34, 0.12]).reshape(3, 1, 1)
    soil = np.array([0.38, 0.27, 0.16]).reshape(3, 1, 1)
    mix = _smooth_field(rng, n, 4, 1)
    image = vegetation * mix + soil * (1.0 - mix)
    image = image + cfg.noise * (_smooth_field(rng, n, 8, 3) - 0.5)

    falloff = np.zeros((n, n))
    blobs = int(rng.integers(cfg.min_blobs, cfg.max_blobs + 1))
    lo, hi = cfg.radius_range
    for _ in range(blobs):
        cy, cx = rng.uniform(0.15 * n, 0.85 * n, size=2)
        ry, rx = rng.uniform(lo * n, hi * n, size=2)
        theta = rng.uniform(0.0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = (dx * np.cos(theta) + dy * np.sin(theta)) / rx
        v = (-dx * np.sin(theta) + dy * np.cos(theta)) / ry
        falloff = np.maximum(falloff, np.clip(1.0 - (u * u + v * v), 0.0, 1.0))

    flicker = 0.85 + 0.15 * _smooth_field(rng, n, 6, 1)
    fire = np.array([1.0, 0.45, 0.06]).reshape(3, 1, 1) * flicker
    alpha = np.clip(falloff * 2.0, 0.0, 1.0)[np.newaxis]
    image = image * (1.0 - alpha) + fire * alpha
    mask = (falloff > 0.5).astype(np.uint8)
    return Sample(np.clip(image, 0.0, 1.0).astype(np.float32), mask, f"synth-{cfg.seed}-{index:05d}")


def generate_synthetic(cfg: SynthConfig) -> List[Sample]:
    """
    Render ``cfg.count`` fire scenes.

    The background is a low-frequency vegetation/soil field; fires are
    anisotropic radial-falloff blobs in red-orange with flicker. The mask is
    exactly the set of pixels where the strongest blob falloff exceeds 0.5.
    """
    return [_render_scene(cfg, i) for i in range(cfg.count)]


def split(
    samples: Sequence[Sample],
    fractions: Sequence[float] = DEFAULT_SPLIT,
    seed: int = 0,
) -> Tuple[List[Sample], List[Sample], List[Sample]]:
    """
    Seeded shuffle then contiguous train/val/test slices; the test slice absorbs rounding.

    Raises:
        FractionSumError: fractions are negative or do not sum to 1.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-6:
        raise FractionSumError(f"split fractions must be three non-negative values summing to 1, got {fractions}")
    n = len(samples)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(np.floor(n * fractions[0] + 1e-9))
    n_val = int(np.floor(n * fractions[1] + 1e-9))
    shuffled = [samples[i] for i in order]
    return shuffled[:n_train], shuffled[n_train: n_train + n_val], shuffled[n_train + n_val:]


def nearest_indices(out_size: int, in_size: int) -> np.ndarray:
    return np.minimum(((np.arange(out_size) + 0.5) * in_size / out_size).astype(np.int64), in_size - 1)


def resize_bilinear(sample: Sample, h: int, w: int) -> Sample:
    """Bilinear image resize (half-pixel centres), nearest-neighbour mask resize."""
    if h < 1 or w < 1:
        raise ValueError(f"target size must be positive, got {h}x{w}")
    in_h, in_w = sample.size
    if (h, w) == (in_h, in_w):
        return sample
    ah = bilinear_matrix(h, in_h)
    aw = bilinear_matrix(w, in_w)
    image = np.einsum("ij,cjk,lk->cil", ah, sample.image, aw).astype(np.float32)
    mask = sample.mask[np.ix_(nearest_indices(h, in_h), nearest_indices(w, in_w))]
    return replace(sample, image=np.clip(image, 0.0, 1.0), mask=mask)


def stack_batch(samples: Sequence[Sample]) -> Tuple[np.ndarray, np.ndarray]:
    """(N x 3 x H x W images, N x H x W masks)."""
    return (
        np.stack([s.image for s in samples]).astype(np.float32),
        np.stack([s.mask for s in samples]).astype(np.uint8),
    )
