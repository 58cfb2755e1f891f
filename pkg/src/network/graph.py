"""
NetworkGraph: an ordered layer DAG with named taps and a parameter store.

Nodes are listed in execution order and may only read from ``input`` or from
earlier nodes, which makes the wiring acyclic by construction. The executor
runs a forward pass (optionally keeping caches for backward) and supports
four orthogonal hooks:

- per-node precision tags of a quantized graph (FP32 / FP16 / INT8),
- AMP casting of convolution inputs and weights through binary16,
- quantization hooks (QAT fake-quant of weights and activations),
- an allocation tracker that sees every buffer acquisition and release.
"""
import copy
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, Iterator, List, Optional, Protocol, Tuple

import numpy as np

from src.errors import (
    EmberError,
    GraphValidationError,
    MissingStatsError,
    ShapeMismatchError,
    TapMissingError,
)
from src.network.layers import BatchNorm, Conv2d, LayerSpec, Node, Shape
from src.numerics.half import round_to_half
from src.numerics.quant import QuantParams, dequantize_array, quantize_array
from src.numerics.tensor import DType, Tensor

INPUT = "input"


class Precision(str, Enum):
    INT8 = "int8"
    FP16 = "fp16"
    FP32 = "fp32"


class AllocationTracker(Protocol):
    """Receives buffer acquisitions and releases from the executor."""

    def on_alloc(self, nbytes: int, tag: str) -> int:
        ...

    def on_free(self, handle: int) -> None:
        ...


class QuantHooks(Protocol):
    """Training-time fake quantization. Each call returns the value to use and an STE mask."""

    def weight(self, node: str, w: np.ndarray) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        ...

    def activation(self, node: str, spec: LayerSpec, y: np.ndarray) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        ...


Observer = Callable[[str, np.ndarray], None]


@dataclass
class BackwardResult:
    param_grads: Dict[str, np.ndarray]
    grad_input: Optional[np.ndarray]


@dataclass
class ForwardPass:
    """Result of one forward run; keeps what backward needs when gradients were requested."""

    graph: "NetworkGraph"
    output: np.ndarray
    values: Dict[str, np.ndarray]
    caches: Dict[str, tuple] = field(default_factory=dict)
    tracker: Optional[AllocationTracker] = None
    live: Dict[str, int] = field(default_factory=dict)
    buffer_updates: Dict[str, np.ndarray] = field(default_factory=dict)

    def commit_buffers(self) -> None:
        """Write the running statistics gathered by a training forward into the graph."""
        self.graph.apply_buffers(self.buffer_updates)
        self.buffer_updates = {}

    def tap(self, name: str) -> np.ndarray:
        node_name = self.graph.taps.get(name, name)
        if node_name not in self.values:
            raise TapMissingError(name)
        return self.values[node_name]

    def release(self) -> None:
        """Free every still-tracked buffer of this pass."""
        if self.tracker is not None:
            for handle in self.live.values():
                self.tracker.on_free(handle)
        self.live = {}

    def backward(self, grad_output: np.ndarray) -> BackwardResult:
        if not self.caches:
            raise RuntimeError("forward ran without requires_grad; no caches to differentiate")
        nodes = self.graph.nodes
        grads: Dict[str, np.ndarray] = {self.graph.output: np.asarray(grad_output, dtype=np.float32)}
        param_grads: Dict[str, np.ndarray] = {}
        for node in reversed(nodes):
            g = grads.pop(node.name, None)
            if g is None:
                continue
            cache, params, weight_mask, act_mask = self.caches[node.name]
            if act_mask is not None:
                g = g * act_mask
            grad_inputs, grad_params = node.spec.backward(g, cache, params)
            if weight_mask is not None and "weight" in grad_params:
                grad_params["weight"] = grad_params["weight"] * weight_mask
            trainable = node.spec.trainable()
            for suffix, value in grad_params.items():
                if suffix in trainable:
                    param_grads[f"{node.name}.{suffix}"] = value
            for src, gi in zip(node.inputs, grad_inputs):
                grads[src] = gi if src not in grads else grads[src] + gi
        self.release()
        return BackwardResult(param_grads, grads.get(INPUT))


class NetworkGraph:
    """
    Ordered layer DAG with explicit wiring, named taps and a parameter store.

    Parameters are keyed ``"<node>.<suffix>"`` and held as Tensors so a graph
    can carry mixed precisions after post-training quantization.
    """

    def __init__(
        self,
        nodes: List[Node],
        input_shape: Tuple[int, int, int],
        output: str,
        taps: Optional[Dict[str, str]] = None,
        params: Optional[Dict[str, Tensor]] = None,
        precisions: Optional[Dict[str, Precision]] = None,
        act_qparams: Optional[Dict[str, QuantParams]] = None,
        config: Any = None,
        frozen: bool = False,
    ):
        self.nodes = list(nodes)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.output = output
        self.taps = dict(taps or {})
        self.params: Dict[str, Tensor] = dict(params or {})
        self.precisions = {k: Precision(v) for k, v in (precisions or {}).items()}
        self.act_qparams = dict(act_qparams or {})
        self.config = config
        self.frozen = frozen
        self._index = {node.name: node for node in self.nodes}
        self._float_cache: Dict[str, np.ndarray] = {}

    # structure

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self) -> Iterator[Node]:
        return iter(self.nodes)

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def node(self, name: str) -> Node:
        return self._index[name]

    @property
    def node_names(self) -> List[str]:
        return [node.name for node in self.nodes]

    def consumers(self) -> Dict[str, int]:
        counts = {INPUT: 0, **{node.name: 0 for node in self.nodes}}
        for node in self.nodes:
            for src in node.inputs:
                counts[src] += 1
        counts[self.output] += 1
        return counts

    def precision(self, name: str) -> Precision:
        return self.precisions.get(name, Precision.FP32)

    def validate(self) -> Dict[str, Shape]:
        """
        Check wiring, taps and parameters, then infer every shape.

        Raises:
            GraphValidationError: on any structural or shape problem.
        """
        seen = {INPUT}
        for node in self.nodes:
            if node.name in seen:
                raise GraphValidationError(f"duplicate or reserved node name '{node.name}'")
            missing = [src for src in node.inputs if src not in seen]
            if missing:
                raise GraphValidationError(f"node '{node.name}' reads {missing} before they exist")
            seen.add(node.name)
        if self.output not in self._index:
            raise GraphValidationError(f"output node '{self.output}' does not exist")
        for tap, target in self.taps.items():
            if target not in self._index:
                raise GraphValidationError(f"tap '{tap}' points at missing node '{target}'")
        for node in self.nodes:
            for suffix, shape in node.spec.param_shapes().items():
                key = f"{node.name}.{suffix}"
                if key not in self.params:
                    raise GraphValidationError(f"parameter '{key}' is missing")
                if self.params[key].shape != tuple(shape):
                    raise GraphValidationError(
                        f"parameter '{key}' has shape {self.params[key].shape}, expected {tuple(shape)}"
                    )
        try:
            return self.infer_shapes()
        except EmberError as exc:
            raise GraphValidationError(f"shape inference failed: {exc}") from exc

    def infer_shapes(self, batch: int = 1) -> Dict[str, Shape]:
        shapes: Dict[str, Shape] = {INPUT: (batch, *self.input_shape)}
        for node in self.nodes:
            shapes[node.name] = node.spec.out_shape([shapes[src] for src in node.inputs])
        return shapes

    # parameters

    def float_param(self, key: str) -> np.ndarray:
        tensor = self.params[key]
        if tensor.dtype is DType.F32:
            return tensor.data
        cached = self._float_cache.get(key)
        if cached is None:
            cached = tensor.to_float()
            self._float_cache[key] = cached
        return cached

    def node_params(self, node: Node) -> Dict[str, np.ndarray]:
        return {suffix: self.float_param(f"{node.name}.{suffix}") for suffix in node.spec.param_shapes()}

    def trainable_keys(self) -> List[str]:
        return [f"{node.name}.{suffix}" for node in self.nodes for suffix in node.spec.trainable()]

    def param_bytes(self) -> int:
        return sum(t.nbytes for t in self.params.values())

    def set_param(self, key: str, tensor: Tensor) -> None:
        self.params[key] = tensor
        self._float_cache.pop(key, None)

    def apply_buffers(self, updates: Dict[str, np.ndarray]) -> None:
        for key, value in updates.items():
            self.set_param(key, Tensor(np.asarray(value, dtype=np.float32)))

    def copy(self) -> "NetworkGraph":
        return NetworkGraph(
            self.nodes,
            self.input_shape,
            self.output,
            self.taps,
            {k: Tensor(v.data.copy(), v.dtype, v.qparams) for k, v in self.params.items()},
            self.precisions,
            self.act_qparams,
            self.config,
            self.frozen,
        )

    # execution

    def forward(
        self,
        x,
        *,
        training: bool = False,
        requires_grad: Optional[bool] = None,
        amp: bool = False,
        hooks: Optional[QuantHooks] = None,
        tracker: Optional[AllocationTracker] = None,
        observer: Optional[Observer] = None,
        update_buffers: bool = True,
    ) -> ForwardPass:
        """
        Run the graph on an (N, C, H, W) batch.

        Args:
            training: batch statistics in BatchNorm and running-stat updates.
            update_buffers: commit running-stat updates before returning. When
                False they stay in ``ForwardPass.buffer_updates`` until
                ``commit_buffers`` is called.
            requires_grad: keep caches for ``ForwardPass.backward`` (defaults to ``training``).
            amp: round convolution inputs and weights through binary16.
            hooks: fake-quantization hooks for QAT.
            tracker: allocation tracker notified of every buffer.
            observer: called with each node's output (calibration).
        """
        requires_grad = training if requires_grad is None else requires_grad
        data = x.to_float() if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
        if data.ndim != 4 or tuple(data.shape[1:]) != self.input_shape:
            raise ShapeMismatchError(f"graph expects (N, {self.input_shape}), got {data.shape}")

        values: Dict[str, np.ndarray] = {INPUT: data}
        caches: Dict[str, tuple] = {}
        updates: Dict[str, np.ndarray] = {}
        live: Dict[str, int] = {}
        remaining = self.consumers()
        if tracker is not None:
            live[INPUT] = tracker.on_alloc(data.nbytes, INPUT)

        for node in self.nodes:
            precision = self.precision(node.name)
            inputs = [values[src] for src in node.inputs]
            is_conv = isinstance(node.spec, Conv2d)
            if precision is Precision.FP16 or (amp and is_conv):
                inputs = [round_to_half(a) for a in inputs]

            params = self.node_params(node)
            weight_mask = None
            if is_conv:
                weight = params["weight"]
                if amp:
                    weight = round_to_half(weight)
                if hooks is not None:
                    weight, weight_mask = hooks.weight(node.name, weight)
                params = {**params, "weight": weight}

            out, cache = node.spec.forward(inputs, params, training)
            if training:
                for suffix, value in node.spec.buffer_updates(cache, params).items():
                    updates[f"{node.name}.{suffix}"] = value

            act_mask = None
            if precision is Precision.INT8:
                qp = self.act_qparams.get(node.name)
                if qp is None:
                    raise MissingStatsError(node.name)
                out = dequantize_array(quantize_array(out, qp), qp)
            elif precision is Precision.FP16:
                out = round_to_half(out)
            if hooks is not None:
                out, act_mask = hooks.activation(node.name, node.spec, out)
            if observer is not None:
                observer(node.name, out)

            values[node.name] = out
            if requires_grad:
                caches[node.name] = (cache, params, weight_mask, act_mask)

            if tracker is not None:
                live[node.name] = tracker.on_alloc(out.nbytes, node.name)
                if requires_grad:
                    cache_bytes = _cache_nbytes(cache)
                    if cache_bytes:
                        live[f"{node.name}:cache"] = tracker.on_alloc(cache_bytes, f"{node.name}:cache")
                else:
                    for src in node.inputs:
                        remaining[src] -= 1
                        if remaining[src] == 0 and src in live:
                            tracker.on_free(live.pop(src))

        result = ForwardPass(self, values[self.output], values, caches, tracker, live, updates)
        if update_buffers:
            result.commit_buffers()
        if not requires_grad:
            result.release()
        return result


def _cache_nbytes(cache: Any) -> int:
    if isinstance(cache, np.ndarray):
        return int(cache.nbytes)
    if isinstance(cache, (tuple, list)):
        return sum(_cache_nbytes(item) for item in cache)
    return 0


def freeze(graph: NetworkGraph) -> NetworkGraph:
    """
    Inference graph with every Conv -> BatchNorm pair folded into the conv.

    A BatchNorm is folded when its only input is a convolution whose output
    feeds nothing else; folded convs gain a bias. References to a removed
    BatchNorm (wiring, taps, output) are redirected to its convolution.
    """
    consumers = graph.consumers()
    params = {k: Tensor(v.to_float().copy()) for k, v in graph.params.items()}
    rename: Dict[str, str] = {}
    folded_convs: Dict[str, Conv2d] = {}

    for node in graph.nodes:
        if not isinstance(node.spec, BatchNorm) or len(node.inputs) != 1:
            continue
        src = node.inputs[0]
        if src not in graph or not isinstance(graph.node(src).spec, Conv2d) or consumers[src] != 1:
            continue
        conv = graph.node(src).spec
        bn = node.spec
        gamma = params.pop(f"{node.name}.gamma").data.reshape(-1)
        beta = params.pop(f"{node.name}.beta").data.reshape(-1)
        mean = params.pop(f"{node.name}.running_mean").data.reshape(-1)
        var = params.pop(f"{node.name}.running_var").data.reshape(-1)
        factor = (gamma / np.sqrt(var + bn.eps)).astype(np.float32)
        weight = params[f"{src}.weight"].data * factor.reshape(-1, 1, 1, 1)
        bias = params.pop(f"{src}.bias").data.reshape(-1) if conv.has_bias else np.zeros_like(mean)
        new_bias = (bias - mean) * factor + beta
        params[f"{src}.weight"] = Tensor(weight.astype(np.float32))
        params[f"{src}.bias"] = Tensor(new_bias.astype(np.float32).reshape(1, -1, 1, 1))
        folded_convs[src] = Conv2d(
            conv.in_ch, conv.out_ch, conv.kernel, conv.stride, conv.dilation, conv.groups, True, conv.padding
        )
        rename[node.name] = src

    nodes: List[Node] = []
    for node in graph.nodes:
        if node.name in rename:
            continue
        spec = folded_convs.get(node.name, node.spec)
        nodes.append(Node(node.name, spec, tuple(rename.get(s, s) for s in node.inputs)))

    frozen = NetworkGraph(
        nodes,
        graph.input_shape,
        rename.get(graph.output, graph.output),
        {tap: rename.get(target, target) for tap, target in graph.taps.items()},
        params,
        {k: v for k, v in graph.precisions.items() if k not in rename},
        {k: v for k, v in graph.act_qparams.items() if k not in rename},
        copy.deepcopy(graph.config),
        frozen=True,
    )
    frozen.validate()
    return frozen
