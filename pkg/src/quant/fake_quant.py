"""
Simulated quantization for quantization-aware training.

``fake_quant_forward`` snaps values onto the int8 grid and returns them as
float32; ``fake_quant_backward`` is the straight-through estimator, passing
gradients only where the input lies inside the representable range.
"""
from typing import Dict, Optional, Tuple

import numpy as np

from src.network.layers import Activation, Add, LayerSpec
from src.numerics.quant import (
    INT8_MAX,
    Granularity,
    QuantParams,
    SaturationCounter,
    dequantize_array,
    quantize_array,
)
from src.quant.calibration import params_from_range


def fake_quant_forward(
    x: np.ndarray, p: QuantParams, counter: Optional[SaturationCounter] = None
) -> np.ndarray:
    return dequantize_array(quantize_array(x, p, counter), p)


def ste_mask(x: np.ndarray, p: QuantParams) -> np.ndarray:
    """1.0 where ``x`` lies inside ``[s(qmin - z), s(qmax - z)]``, else 0.0."""
    arr = np.asarray(x, dtype=np.float64)
    scale = p.scale_array(arr.ndim)
    low = scale * (p.qmin - p.zero_point)
    high = scale * (p.qmax - p.zero_point)
    return ((arr >= low) & (arr <= high)).astype(np.float32)


def fake_quant_backward(grad_out: np.ndarray, x: np.ndarray, p: QuantParams) -> np.ndarray:
    return (np.asarray(grad_out, dtype=np.float32) * ste_mask(x, p)).astype(np.float32)


def weight_params(w: np.ndarray, granularity: Granularity = Granularity.PER_CHANNEL) -> QuantParams:
    """Symmetric int8 params for a conv weight (output channels on axis 0)."""
    w = np.asarray(w, dtype=np.float64)
    if granularity is Granularity.PER_CHANNEL:
        absmax = np.abs(w).reshape(w.shape[0], -1).max(axis=1)
        scales = np.where(absmax > 0, absmax / INT8_MAX, 1.0)
        return QuantParams.symmetric_int8(tuple(scales), Granularity.PER_CHANNEL, axis=0)
    absmax = float(np.abs(w).max())
    return QuantParams.symmetric_int8((absmax / INT8_MAX if absmax > 0 else 1.0,), axis=0)


class QatObserver:
    """
    Fake-quant hooks for the graph executor.

    Weights use per-channel symmetric params from their current range.
    Outputs of activation and residual-add nodes use asymmetric params from
    a moving average of the observed batch extrema.
    """

    def __init__(self, decay: float = 0.99, weight_granularity: Granularity = Granularity.PER_CHANNEL):
        self.decay = decay
        self.weight_granularity = Granularity(weight_granularity)
        self.ranges: Dict[str, Tuple[float, float]] = {}
        self.enabled = True
        self.observing = True

    def weight(self, node: str, w: np.ndarray) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        if not self.enabled:
            return w, None
        p = weight_params(w, self.weight_granularity)
        return fake_quant_forward(w, p), ste_mask(w, p)

    def activation(self, node: str, spec: LayerSpec, y: np.ndarray) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        if not self.enabled or not isinstance(spec, (Activation, Add)):
            return y, None
        finite = y[np.isfinite(y)]
        if finite.size and self.observing:
            lo, hi = float(finite.min()), float(finite.max())
            if node in self.ranges:
                old_lo, old_hi = self.ranges[node]
                lo = self.decay * old_lo + (1.0 - self.decay) * lo
                hi = self.decay * old_hi + (1.0 - self.decay) * hi
            self.ranges[node] = (lo, hi)
        if node not in self.ranges:
            return y, None
        p = self.params(node)
        return fake_quant_forward(y, p), ste_mask(y, p)

    def params(self, node: str) -> QuantParams:
        lo, hi = self.ranges[node]
        return params_from_range(lo, hi, symmetric=False)

    def state_dict(self) -> Dict[str, list]:
        return {name: [lo, hi] for name, (lo, hi) in self.ranges.items()}

    def load_state_dict(self, state: Dict[str, list]) -> None:
        self.ranges = {name: (float(lo), float(hi)) for name, (lo, hi) in state.items()}
