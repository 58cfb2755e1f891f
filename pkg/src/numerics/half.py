"""
IEEE 754 binary16 emulation.

Scalar conversions work on integer bit patterns and are the reference API.
The array forms apply the same rounding rules with numpy integer ops and
feed every F16 compute path in the toolkit.
"""
import math
import struct
from dataclasses import dataclass
from typing import Union

import numpy as np

HALF_MAX = 65504.0
FLOAT32_MAX = 3.4028234663852886e38

POS_INF_BITS = 0x7C00
NEG_INF_BITS = 0xFC00
QUIET_NAN_BITS = 0x7E00


@dataclass(frozen=True)
class Half:
    """A binary16 value held as its 16-bit pattern."""

    bits: int

    def __post_init__(self):
        if not 0 <= self.bits <= 0xFFFF:
            raise ValueError(f"half bit pattern out of range: {self.bits:#x}")

    @property
    def sign(self) -> int:
        return self.bits >> 15

    @property
    def exponent(self) -> int:
        return (self.bits >> 10) & 0x1F

    @property
    def mantissa(self) -> int:
        return self.bits & 0x3FF

    def is_nan(self) -> bool:
        return self.exponent == 0x1F and self.mantissa != 0

    def __float__(self) -> float:
        return from_half(self)


def float32_bits(x: float) -> int:
    """Bit pattern of ``x`` rounded to binary32."""
    return struct.unpack("<I", struct.pack("<f", x))[0]


def _round_shift(value: int, shift: int) -> int:
    """Shift right by ``shift`` bits with round-half-to-even."""
    kept = value >> shift
    rem = value & ((1 << shift) - 1)
    half = 1 << (shift - 1)
    if rem > half or (rem == half and kept & 1):
        kept += 1
    return kept


def to_half(x: float) -> Half:
    """
    Round a real to the nearest binary16 value.

    The input is first rounded to binary32. Ties go to even, values beyond the
    rounding threshold above 65504 become signed infinity, subnormals are kept
    and NaN maps to the quiet NaN pattern with the input's sign.
    """
    if not math.isnan(x) and abs(x) > FLOAT32_MAX:
        return Half(NEG_INF_BITS if x < 0 else POS_INF_BITS)

    f = float32_bits(x)
    sign = (f >> 16) & 0x8000
    exp = (f >> 23) & 0xFF
    man = f & 0x7FFFFF

    if exp == 0xFF:
        return Half(sign | (QUIET_NAN_BITS if man else POS_INF_BITS))
    if exp >= 143:
        # |x| >= 2^16
        return Half(sign | POS_INF_BITS)
    if exp >= 113:
        # a carry out of the mantissa lands in the exponent, 0x7C00 included
        h = _round_shift(((exp - 112) << 23) | man, 13)
        return Half(sign | h)
    if exp < 102:
        # below half the smallest subnormal
        return Half(sign)
    h = _round_shift(man | 0x800000, 126 - exp)
    return Half(sign | h)


def from_half(h: Union[Half, int]) -> float:
    """Exact widening of a binary16 pattern."""
    bits = h.bits if isinstance(h, Half) else int(h)
    sign = -1.0 if bits & 0x8000 else 1.0
    exp = (bits >> 10) & 0x1F
    man = bits & 0x3FF
    if exp == 0:
        return sign * math.ldexp(man, -24)
    if exp == 0x1F:
        return sign * math.inf if man == 0 else math.nan
    return sign * math.ldexp(1024 + man, exp - 25)


def half_bits(x: np.ndarray) -> np.ndarray:
    """Vectorised ``to_half``: binary16 patterns of ``x`` as ``uint16``."""
    f = np.ascontiguousarray(x, dtype=np.float32).view(np.uint32)
    sign = (f >> 16) & 0x8000
    exp = (f >> 23) & 0xFF
    man = f & 0x7FFFFF

    # normal range
    normal_src = ((exp.astype(np.int64) - 112) << 23) | man
    normal_src = np.where(exp >= 113, normal_src, 0)
    normal = normal_src >> 13
    rem = normal_src & 0x1FFF
    normal = normal + ((rem > 0x1000) | ((rem == 0x1000) & (normal & 1 == 1)))

    # subnormal range, shift in [14, 24]
    shift = np.clip(126 - exp.astype(np.int64), 14, 24)
    mant = (man | 0x800000).astype(np.int64)
    sub = mant >> shift
    sub_rem = mant & ((np.int64(1) << shift) - 1)
    sub_half = np.int64(1) << (shift - 1)
    sub = sub + ((sub_rem > sub_half) | ((sub_rem == sub_half) & (sub & 1 == 1)))

    out = np.where(exp >= 113, normal, np.where(exp >= 102, sub, 0))
    out = np.where(exp >= 143, POS_INF_BITS, out)
    out = np.where(exp == 0xFF, np.where(man != 0, QUIET_NAN_BITS, POS_INF_BITS), out)
    return (out | sign).astype(np.uint16)


def half_bits_to_float(bits: np.ndarray) -> np.ndarray:
    """Vectorised ``from_half``: exact float32 widening of ``uint16`` patterns."""
    b = np.asarray(bits).astype(np.uint32)
    sign = (b & 0x8000) << 16
    exp = (b >> 10) & 0x1F
    man = b & 0x3FF

    normal = sign | ((exp + 112) << 23) | (man << 13)
    special = sign | 0x7F800000 | (man << 13)
    wide = np.where(exp == 0x1F, special, normal).astype(np.uint32).view(np.float32)

    magnitude = man.astype(np.float32) * np.float32(2.0 ** -24)
    subnormal = np.copysign(magnitude, np.where(sign != 0, -1.0, 1.0).astype(np.float32))
    return np.where(exp == 0, subnormal, wide).astype(np.float32)


def round_to_half(x: np.ndarray) -> np.ndarray:
    """Round an array through binary16 and widen back to float32."""
    arr = np.asarray(x, dtype=np.float32)
    return half_bits_to_float(half_bits(arr)).reshape(arr.shape)


def is_half_exact(x: np.ndarray) -> bool:
    """True when re-rounding ``x`` through binary16 is the identity."""
    arr = np.asarray(x, dtype=np.float32)
    return bool(np.array_equal(round_to_half(arr), arr, equal_nan=True))
