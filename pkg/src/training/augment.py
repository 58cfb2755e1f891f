"""
Training-time augmentation: horizontal flip and four-corner perspective warp.

The image is resampled bilinearly, the mask by nearest neighbour so it stays
binary. Every call consumes the same number of random draws, so a sample's
transform depends only on its generator's seed.
"""
from dataclasses import replace
from typing import Optional

import numpy as np

from src.data.samples import Sample


def horizontal_flip(sample: Sample) -> Sample:
    return replace(sample, image=sample.image[:, :, ::-1].copy(), mask=sample.mask[:, ::-1].copy())


def homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3 x 3 matrix mapping the four ``src`` points (x, y) onto ``dst``."""
    rows = []
    rhs = []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        rhs += [u, v]
    h = np.linalg.solve(np.asarray(rows, dtype=np.float64), np.asarray(rhs, dtype=np.float64))
    return np.append(h, 1.0).reshape(3, 3)


def _bilinear_sample(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    _, h, w = image.shape
    xs = np.clip(xs, 0.0, w - 1)
    ys = np.clip(ys, 0.0, h - 1)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    top = image[:, y0, x0] * (1 - fx) + image[:, y0, x1] * fx
    bottom = image[:, y1, x0] * (1 - fx) + image[:, y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def perspective_warp(sample: Sample, offsets: np.ndarray) -> Sample:
    """
    Warp so that each output corner samples the input at ``corner + offset``.

    ``offsets`` is 4 x 2 (x, y) in pixels for the corners top-left,
    top-right, bottom-right, bottom-left. Out-of-frame reads clamp to the edge.
    """
    offsets = np.asarray(offsets, dtype=np.float64)
    if not offsets.any():
        return sample
    h, w = sample.size
    corners = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
    m = homography(corners, corners + offsets)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    pts = m @ np.stack([xs.ravel(), ys.ravel(), np.ones(h * w)])
    src_x = (pts[0] / pts[2]).reshape(h, w)
    src_y = (pts[1] / pts[2]).reshape(h, w)
    image = _bilinear_sample(sample.image.astype(np.float64), src_x, src_y)
    mx = np.clip(np.rint(src_x), 0, w - 1).astype(np.int64)
    my = np.clip(np.rint(src_y), 0, h - 1).astype(np.int64)
    return replace(sample, image=np.clip(image, 0.0, 1.0).astype(np.float32), mask=sample.mask[my, mx])


def augment(
    sample: Sample,
    rng: np.random.Generator,
    jitter: float = 0.1,
    flip_p: float = 0.5,
    warp_p: float = 0.5,
    suffix: Optional[str] = None,
) -> Sample:
    """Flip with probability ``flip_p``; warp with probability ``warp_p`` and corner jitter up to ``jitter`` of each side."""
    do_flip = rng.random() < flip_p
    do_warp = rng.random() < warp_p
    h, w = sample.size
    offsets = rng.uniform(-1.0, 1.0, size=(4, 2)) * jitter * np.array([w - 1, h - 1])
    out = horizontal_flip(sample) if do_flip else sample
    if do_warp:
        out = perspective_warp(out, offsets)
    if suffix:
        out = replace(out, id=f"{sample.id}{suffix}")
    return out
