"""Precision-tagged tensors, binary16 emulation and affine quantization."""

from src.numerics.half import Half, from_half, half_bits, half_bits_to_float, round_to_half, to_half
from src.numerics.quant import (
    Granularity,
    QuantParams,
    SaturationCounter,
    dequantize,
    dequantize_array,
    quantize,
    quantize_array,
)
from src.numerics.tensor import DType, Tensor, cast_tensor

__all__ = [
    "DType",
    "Granularity",
    "Half",
    "QuantParams",
    "SaturationCounter",
    "Tensor",
    "cast_tensor",
    "dequantize",
    "dequantize_array",
    "from_half",
    "half_bits",
    "half_bits_to_float",
    "quantize",
    "quantize_array",
    "round_to_half",
    "to_half",
]
