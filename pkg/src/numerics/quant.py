"""
Affine integer quantization: real ~= scale * (q - zero_point).

Rounding is round-half-to-even everywhere, the same rule the binary16 path
uses. NaN inputs quantize to the zero-point and are counted.
"""
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np

INT8_MIN = -128
INT8_MAX = 127
SYMMETRIC_QMIN = -127


class Granularity(str, Enum):
    PER_TENSOR = "per_tensor"
    PER_CHANNEL = "per_channel"


@dataclass
class SaturationCounter:
    """Counts elements clamped to [qmin, qmax] and NaNs mapped to the zero-point."""

    clamped: int = 0
    nan: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def record(self, clamped: int, nan: int) -> None:
        with self._lock:
            self.clamped += int(clamped)
            self.nan += int(nan)

    @property
    def total(self) -> int:
        return self.clamped + self.nan


@dataclass(frozen=True)
class QuantParams:
    """
    Scale(s), zero-point and clamp range of one quantized tensor.

    ``axis`` names the channel dimension for per-channel scales: 1 for NCHW
    activations, 0 for convolution weights.
    """

    scale: Tuple[float, ...]
    zero_point: int = 0
    qmin: int = INT8_MIN
    qmax: int = INT8_MAX
    granularity: Granularity = Granularity.PER_TENSOR
    symmetric: bool = False
    axis: int = 1

    def __post_init__(self):
        object.__setattr__(self, "scale", tuple(float(s) for s in np.ravel(self.scale)))
        object.__setattr__(self, "granularity", Granularity(self.granularity))
        if not self.scale:
            raise ValueError("QuantParams needs at least one scale")
        if any(not np.isfinite(s) or s <= 0 for s in self.scale):
            raise ValueError(f"every scale must be positive and finite, got {self.scale}")
        if not INT8_MIN <= self.qmin < self.qmax <= INT8_MAX:
            raise ValueError(f"invalid clamp range [{self.qmin}, {self.qmax}]")
        if not self.qmin <= self.zero_point <= self.qmax:
            raise ValueError(f"zero_point {self.zero_point} outside [{self.qmin}, {self.qmax}]")
        if self.symmetric and self.zero_point != 0:
            raise ValueError("symmetric quantization requires zero_point == 0")
        if self.granularity is Granularity.PER_TENSOR and len(self.scale) != 1:
            raise ValueError("per-tensor params carry exactly one scale")

    @classmethod
    def symmetric_int8(cls, scale, granularity=Granularity.PER_TENSOR, axis: int = 1) -> "QuantParams":
        return cls(
            scale=scale,
            zero_point=0,
            qmin=SYMMETRIC_QMIN,
            qmax=INT8_MAX,
            granularity=granularity,
            symmetric=True,
            axis=axis,
        )

    @classmethod
    def asymmetric_int8(cls, scale: float, zero_point: int, axis: int = 1) -> "QuantParams":
        return cls(scale=(scale,), zero_point=int(zero_point), axis=axis)

    @property
    def channels(self) -> int:
        return len(self.scale)

    def scale_for(self, channel: int = 0) -> float:
        if self.granularity is Granularity.PER_CHANNEL:
            return self.scale[channel]
        return self.scale[0]

    def clip_range(self, channel: int = 0) -> Tuple[float, float]:
        """Real interval representable without clamping."""
        s = self.scale_for(channel)
        return s * (self.qmin - self.zero_point), s * (self.qmax - self.zero_point)

    def scale_array(self, ndim: int) -> np.ndarray:
        """Scales shaped to broadcast against an ``ndim``-dimensional tensor."""
        scales = np.asarray(self.scale, dtype=np.float64)
        if self.granularity is Granularity.PER_TENSOR:
            return scales.reshape((1,) * ndim)
        shape = [1] * ndim
        shape[self.axis] = scales.size
        return scales.reshape(shape)


def quantize(
    x: float,
    p: QuantParams,
    channel: int = 0,
    counter: Optional[SaturationCounter] = None,
) -> int:
    """q = clamp(round_half_even(x / s) + z, qmin, qmax)."""
    if np.isnan(x):
        if counter is not None:
            counter.record(0, 1)
        return p.zero_point
    v = float(np.rint(np.float64(x) / p.scale_for(channel))) + p.zero_point
    if v < p.qmin or v > p.qmax:
        if counter is not None:
            counter.record(1, 0)
        v = min(max(v, p.qmin), p.qmax)
    return int(v)


def dequantize(q: int, p: QuantParams, channel: int = 0) -> float:
    """(q - z) * s."""
    return (int(q) - p.zero_point) * p.scale_for(channel)


def quantize_array(
    x: np.ndarray,
    p: QuantParams,
    counter: Optional[SaturationCounter] = None,
) -> np.ndarray:
    """Vectorised ``quantize``; per-channel scales broadcast along ``p.axis``."""
    arr = np.asarray(x, dtype=np.float64)
    _check_channels(arr.shape, p)
    v = np.rint(arr / p.scale_array(arr.ndim)) + p.zero_point
    nan = np.isnan(v)
    if nan.any():
        v = np.where(nan, p.zero_point, v)
    out_of_range = (v < p.qmin) | (v > p.qmax)
    if counter is not None:
        counter.record(np.count_nonzero(out_of_range), np.count_nonzero(nan))
    return np.clip(v, p.qmin, p.qmax).astype(np.int8)


def dequantize_array(q: np.ndarray, p: QuantParams) -> np.ndarray:
    """Vectorised ``dequantize`` returning float32."""
    arr = np.asarray(q)
    _check_channels(arr.shape, p)
    return ((arr.astype(np.float64) - p.zero_point) * p.scale_array(arr.ndim)).astype(np.float32)


def _check_channels(shape: Sequence[int], p: QuantParams) -> None:
    if p.granularity is Granularity.PER_CHANNEL:
        if len(shape) <= p.axis or shape[p.axis] != p.channels:
            raise ValueError(
                f"per-channel params carry {p.channels} scales but axis {p.axis} of {tuple(shape)} disagrees"
            )
