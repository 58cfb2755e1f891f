from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from src.errors import MissingParamsError, ShapeMismatchError
from src.numerics.half import is_half_exact, round_to_half
from src.numerics.quant import QuantParams, dequantize_array, quantize_array


class DType(str, Enum):
    F32 = "f32"
    F16 = "f16"
    I8 = "i8"

    @property
    def code(self) -> int:
        return _DTYPE_CODES[self]

    @property
    def itemsize(self) -> int:
        return _ITEMSIZE[self]

    @classmethod
    def from_code(cls, code: int) -> "DType":
        for dtype, value in _DTYPE_CODES.items():
            if value == code:
                return dtype
        raise ValueError(f"unknown dtype code {code}")


_DTYPE_CODES = {DType.F32: 0, DType.F16: 1, DType.I8: 2}
_ITEMSIZE = {DType.F32: 4, DType.F16: 2, DType.I8: 1}


@dataclass(frozen=True)
class Tensor:
    """
    A 4-D NCHW array with a precision tag.

    F16 tensors hold float32 values that are exactly representable in
    binary16. I8 tensors hold int8 codes plus the QuantParams that map them
    back to reals. Parameters use the same layout (weights are O x I/g x k x k,
    per-channel vectors are 1 x C x 1 x 1).
    """

    data: np.ndarray
    dtype: DType = DType.F32
    qparams: Optional[QuantParams] = None

    def __post_init__(self):
        object.__setattr__(self, "dtype", DType(self.dtype))
        if self.data.ndim != 4:
            raise ShapeMismatchError(f"tensors are 4-D (n, c, h, w), got shape {self.data.shape}")
        if self.dtype is DType.I8:
            if self.qparams is None:
                raise MissingParamsError("I8 tensor requires QuantParams")
            if self.data.dtype != np.int8:
                raise ValueError(f"I8 tensor data must be int8, got {self.data.dtype}")
            p = self.qparams
            if p.granularity.value == "per_channel" and self.data.shape[p.axis] != p.channels:
                raise ShapeMismatchError(
                    f"{p.channels} per-channel scales for axis {p.axis} of shape {self.data.shape}"
                )
        else:
            if self.qparams is not None:
                raise ValueError(f"{self.dtype.value} tensor must not carry QuantParams")
            if self.data.dtype != np.float32:
                raise ValueError(f"{self.dtype.value} tensor data must be float32, got {self.data.dtype}")
            if self.dtype is DType.F16 and not is_half_exact(self.data):
                raise ValueError("F16 tensor holds values that are not binary16-exact")

    @classmethod
    def from_array(cls, array, dtype: DType = DType.F32) -> "Tensor":
        arr = np.asarray(array, dtype=np.float32)
        while arr.ndim < 4:
            arr = arr[np.newaxis]
        if DType(dtype) is DType.F16:
            arr = round_to_half(arr)
        return cls(np.ascontiguousarray(arr), dtype)

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    @property
    def numel(self) -> int:
        return int(self.data.size)

    @property
    def nbytes(self) -> int:
        """Storage bytes: element payload plus the QuantParams block for I8."""
        extra = 0
        if self.qparams is not None:
            extra = 14 + 8 * self.qparams.channels
        return self.numel * self.dtype.itemsize + extra

    def to_float(self) -> np.ndarray:
        """Real values as float32 (dequantized for I8)."""
        if self.dtype is DType.I8:
            return dequantize_array(self.data, self.qparams)
        return self.data


def cast_tensor(t: Tensor, target: DType, p: Optional[QuantParams] = None) -> Tensor:
    """
    Convert ``t`` to ``target`` precision elementwise, preserving shape.

    Raises:
        MissingParamsError: target is I8 and ``p`` is absent.
    """
    target = DType(target)
    if target is DType.I8:
        if p is None:
            raise MissingParamsError("casting to I8 requires QuantParams")
        return Tensor(quantize_array(t.to_float(), p), DType.I8, p)
    if target is t.dtype:
        return t
    values = t.to_float()
    if target is DType.F16:
        return Tensor(round_to_half(values), DType.F16)
    return Tensor(np.array(values, dtype=np.float32, copy=True), DType.F32)
