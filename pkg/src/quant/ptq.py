"""
Post-training selective-precision conversion.

``calibrate`` gathers activation statistics and flags layers whose
fake-quantized output has a signal-to-quantization-noise ratio below the
policy threshold. ``apply_ptq`` turns a (frozen) F32 graph into a mixed
INT8 / FP16 / FP32 graph plus a PrecisionReport. Wiring, shapes and node
count never change; only parameter storage, precision tags and activation
QuantParams do.
"""
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from src.errors import MissingStatsError
from src.log_helper import get_logger
from src.network.graph import NetworkGraph, Precision
from src.network.layers import Conv2d
from src.numerics.quant import Granularity, QuantParams
from src.numerics.tensor import DType, Tensor, cast_tensor
from src.quant.calibration import ActivationStats, ScaleResult, collect_stats, compute_scale
from src.quant.fake_quant import fake_quant_forward, weight_params
from src.quant.policy import QuantPolicy

_logger = get_logger(__name__)


def sqnr_db(reference: np.ndarray, approx: np.ndarray) -> float:
    """10·log10(signal power / noise power); infinite when the approximation is exact."""
    ref = np.asarray(reference, dtype=np.float64)
    noise = float(np.sum((ref - np.asarray(approx, dtype=np.float64)) ** 2))
    return _ratio_db(float(np.sum(ref ** 2)), noise)


def _ratio_db(signal: float, noise: float) -> float:
    if noise == 0.0:
        return math.inf
    if signal == 0.0:
        return -math.inf
    return 10.0 * math.log10(signal / noise)


def weight_mse(w: np.ndarray) -> Tuple[float, float]:
    """(per-channel MSE, per-tensor MSE) of symmetric int8 weight quantization."""
    w = np.asarray(w, dtype=np.float32)
    errors = []
    for granularity in (Granularity.PER_CHANNEL, Granularity.PER_TENSOR):
        approx = fake_quant_forward(w, weight_params(w, granularity))
        errors.append(float(np.mean((w.astype(np.float64) - approx) ** 2)))
    return errors[0], errors[1]


@dataclass
class Calibration:
    stats: Dict[str, ActivationStats]
    scales: Dict[str, ScaleResult] = field(default_factory=dict)
    sqnr: Dict[str, float] = field(default_factory=dict)

    @property
    def degenerate(self) -> List[str]:
        return [name for name, r in self.scales.items() if r.degenerate]

    def flagged(self, threshold_db: float) -> List[str]:
        return [name for name, value in self.sqnr.items() if value < threshold_db]

    def save(self, path: Union[str, Path]) -> Path:
        """Per-layer params, ranges and SQNR as JSON; histograms are not kept."""
        from src.network.serialize import qparams_to_dict

        layers = {
            name: {
                "params": qparams_to_dict(r.params),
                "low": r.low,
                "high": r.high,
                "degenerate": r.degenerate,
                "sqnr_db": self.sqnr.get(name),
                "observations": self.stats[name].count if name in self.stats else None,
            }
            for name, r in self.scales.items()
        }
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"layers": layers}, indent=2, sort_keys=True), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Calibration":
        from src.network.serialize import qparams_from_dict

        data = json.loads(Path(path).read_text(encoding="utf-8"))
        scales, sqnr = {}, {}
        for name, entry in data.get("layers", {}).items():
            scales[name] = ScaleResult(
                qparams_from_dict(entry["params"]), entry["low"], entry["high"], entry.get("degenerate", False)
            )
            if entry.get("sqnr_db") is not None:
                sqnr[name] = float(entry["sqnr_db"])
        return cls({}, scales, sqnr)


def calibrate(
    graph: NetworkGraph,
    batches: Sequence[np.ndarray],
    policy: Optional[QuantPolicy] = None,
    n_batches: int = 100,
) -> Calibration:
    """Collect statistics, derive per-layer activation params and measure fake-quant SQNR."""
    policy = policy or QuantPolicy()
    batches = list(batches)[:n_batches]
    stats = collect_stats(graph, batches, n_batches=n_batches, bins=policy.bins)
    method = policy.method()
    scales = {
        name: compute_scale(s, method, policy.symmetric_activations, policy.activation_granularity, name)
        for name, s in stats.items()
        if not s.empty
    }
    signal: Dict[str, float] = {name: 0.0 for name in scales}
    noise: Dict[str, float] = {name: 0.0 for name in scales}

    def measure(name: str, out: np.ndarray) -> None:
        if name not in scales:
            return
        ref = np.asarray(out, dtype=np.float64)
        approx = fake_quant_forward(out, scales[name].params)
        signal[name] += float(np.sum(ref ** 2))
        noise[name] += float(np.sum((ref - approx) ** 2))

    for batch in batches:
        graph.forward(batch, observer=measure)
    sqnr = {name: _ratio_db(signal[name], noise[name]) for name in scales}
    result = Calibration(stats, scales, sqnr)
    for name in result.flagged(policy.auto_flag_sqnr_db):
        _logger.warning("layer '%s' fake-quant SQNR %.1f dB is below %.1f dB", name, sqnr[name], policy.auto_flag_sqnr_db)
    return result


class LayerReport(BaseModel):
    name: str
    kind: str
    precision: Precision
    reason: str
    bytes_before: int
    bytes_after: int
    weight_scale_min: Optional[float] = None
    weight_scale_max: Optional[float] = None
    act_scale: Optional[float] = None
    act_zero_point: Optional[int] = None
    sqnr_db: Optional[float] = None
    weight_mse_per_channel: Optional[float] = None
    weight_mse_per_tensor: Optional[float] = None


class PrecisionReport(BaseModel):
    """Per-layer precision decisions with model size before and after conversion."""

    layers: List[LayerReport] = Field(default_factory=list)
    bytes_before: int = 0
    bytes_after: int = 0
    auto_flagged: List[str] = Field(default_factory=list)
    degenerate: List[str] = Field(default_factory=list)
    forward_eps: Optional[float] = None

    @property
    def size_ratio(self) -> float:
        return self.bytes_after / self.bytes_before if self.bytes_before else 1.0

    def counts(self) -> Dict[str, int]:
        totals = {p.value: 0 for p in Precision}
        for layer in self.layers:
            totals[layer.precision.value] += 1
        return totals

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    def table(self) -> str:
        header = f"{'layer':<28} {'kind':<10} {'prec':<5} {'reason':<12} {'bytes':>14} {'act scale':>10}"
        lines = [header, "-" * len(header)]
        for layer in self.layers:
            size = f"{layer.bytes_before}->{layer.bytes_after}"
            scale = "" if layer.act_scale is None else f"{layer.act_scale:.3g}"
            lines.append(
                f"{layer.name:<28} {layer.kind:<10} {layer.precision.value:<5} {layer.reason:<12} {size:>14} {scale:>10}"
            )
        lines.append("-" * len(header))
        lines.append(
            f"model bytes {self.bytes_before} -> {self.bytes_after} (ratio {self.size_ratio:.3f}); "
            f"precisions {self.counts()}"
        )
        if self.auto_flagged:
            lines.append(f"auto-flagged (SQNR below threshold, not user-declared): {', '.join(self.auto_flagged)}")
        if self.forward_eps is not None:
            lines.append(f"max |quantized - f32| on evaluation data: {self.forward_eps:.4g}")
        return "\n".join(lines)


def _convert_param(suffix: str, spec, value: np.ndarray, precision: Precision, granularity: Granularity) -> Tensor:
    if precision is Precision.FP16:
        return Tensor.from_array(value, DType.F16)
    if precision is Precision.INT8 and isinstance(spec, Conv2d) and suffix == "weight":
        return cast_tensor(Tensor(value), DType.I8, weight_params(value, granularity))
    return Tensor(np.array(value, dtype=np.float32, copy=True))


def apply_ptq(
    graph: NetworkGraph,
    policy: QuantPolicy,
    stats: Union[Calibration, Dict[str, ActivationStats]],
    eval_batches: Iterable[np.ndarray] = (),
) -> Tuple[NetworkGraph, PrecisionReport]:
    """
    Convert ``graph`` according to ``policy``.

    INT8 convs store per-channel (or per-tensor) symmetric int8 weights and
    every INT8 node gets activation QuantParams from ``stats``. FP16 nodes
    store binary16 parameters. When ``eval_batches`` are given, the largest
    absolute deviation from the F32 forward is measured and reported.

    Raises:
        MissingStatsError: an INT8 node has no statistics.
        UnknownLayerError: the policy names a layer not in the graph.
    """
    calibration = stats if isinstance(stats, Calibration) else Calibration(stats)
    flagged = calibration.flagged(policy.auto_flag_sqnr_db)
    resolved = policy.resolve(graph, flagged)
    method = policy.method()

    params: Dict[str, Tensor] = {}
    precisions: Dict[str, Precision] = {}
    act_qparams: Dict[str, QuantParams] = {}
    layers: List[LayerReport] = []
    for node in graph.nodes:
        precision, reason = resolved[node.name]
        precisions[node.name] = precision
        report = LayerReport(
            name=node.name,
            kind=node.spec.kind,
            precision=precision,
            reason=reason,
            bytes_before=0,
            bytes_after=0,
            sqnr_db=calibration.sqnr.get(node.name),
        )
        if precision is Precision.INT8:
            scale = calibration.scales.get(node.name)
            if scale is None:
                node_stats = calibration.stats.get(node.name)
                if node_stats is None or node_stats.empty:
                    raise MissingStatsError(node.name)
                scale = compute_scale(
                    node_stats, method, policy.symmetric_activations, policy.activation_granularity, node.name
                )
            act_qparams[node.name] = scale.params
            report.act_scale = scale.params.scale[0]
            report.act_zero_point = scale.params.zero_point

        for suffix in node.spec.param_shapes():
            key = f"{node.name}.{suffix}"
            value = graph.float_param(key)
            tensor = _convert_param(suffix, node.spec, value, precision, policy.weight_granularity)
            params[key] = tensor
            report.bytes_before += graph.params[key].nbytes
            report.bytes_after += tensor.nbytes
            if tensor.dtype is DType.I8:
                report.weight_scale_min = min(tensor.qparams.scale)
                report.weight_scale_max = max(tensor.qparams.scale)
                report.weight_mse_per_channel, report.weight_mse_per_tensor = weight_mse(value)
        layers.append(report)
        _logger.info("%s -> %s (%s)", node.name, precision.value, reason)

    quantized = NetworkGraph(
        graph.nodes,
        graph.input_shape,
        graph.output,
        graph.taps,
        params,
        precisions,
        act_qparams,
        graph.config,
        graph.frozen,
    )
    report = PrecisionReport(
        layers=layers,
        bytes_before=graph.param_bytes(),
        bytes_after=quantized.param_bytes(),
        auto_flagged=flagged,
        degenerate=calibration.degenerate,
    )
    eps = 0.0
    measured = False
    for batch in eval_batches:
        reference = graph.forward(batch).output
        eps = max(eps, float(np.max(np.abs(quantized.forward(batch).output - reference))))
        measured = True
    if measured:
        report.forward_eps = eps
    _logger.info(
        "PTQ: %d bytes -> %d bytes (ratio %.3f), %s",
        report.bytes_before,
        report.bytes_after,
        report.size_ratio,
        report.counts(),
    )
    return quantized, report


def quantize_weights(w: np.ndarray, granularity: Granularity = Granularity.PER_CHANNEL) -> Tensor:
    """Int8 tensor of a conv weight with symmetric params."""
    w = np.asarray(w, dtype=np.float32)
    return cast_tensor(Tensor(w), DType.I8, weight_params(w, granularity))
