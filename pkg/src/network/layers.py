"""
Layer specifications.

A spec is an immutable description of one graph node: it knows its parameter
shapes, infers its output shape and runs forward/backward through
``src.network.functional``. Parameters arrive as a ``{suffix: array}`` dict
resolved by the executor (``weight``, ``bias``, ``gamma``, ...).
"""
from dataclasses import asdict, dataclass, field
from typing import Any, ClassVar, Dict, List, Optional, Tuple

import numpy as np

from src.errors import InvalidGroupsError, ShapeMismatchError, SlopeLengthMismatchError
from src.network import functional as F
from src.network.functional import ActivationKind

Shape = Tuple[int, int, int, int]


@dataclass(frozen=True)
class LayerSpec:
    kind: ClassVar[str] = "layer"

    def param_shapes(self) -> Dict[str, Shape]:
        return {}

    def trainable(self) -> Tuple[str, ...]:
        """Parameter suffixes updated by the optimizer."""
        return tuple(self.param_shapes())

    def out_shape(self, in_shapes: List[Shape]) -> Shape:
        raise NotImplementedError

    def forward(self, inputs: List[np.ndarray], params: Dict[str, np.ndarray], training: bool):
        raise NotImplementedError

    def backward(self, grad: np.ndarray, cache, params: Dict[str, np.ndarray]):
        """Return ``(grads for each input, {suffix: param grad})``."""
        raise NotImplementedError

    def buffer_updates(self, cache, params: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        """Non-trainable buffers a training forward wants to replace, by suffix."""
        return {}

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["kind"] = self.kind
        return data

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> "LayerSpec":
        payload = dict(data)
        kind = payload.pop("kind")
        cls = LAYER_KINDS.get(kind)
        if cls is None:
            raise ValueError(f"unknown layer kind '{kind}'")
        return cls(**payload)


def _single(in_shapes: List[Shape]) -> Shape:
    if len(in_shapes) != 1:
        raise ShapeMismatchError(f"expected one input, got {len(in_shapes)}")
    return in_shapes[0]


@dataclass(frozen=True)
class Conv2d(LayerSpec):
    kind: ClassVar[str] = "conv2d"

    in_ch: int
    out_ch: int
    kernel: int = 1
    stride: int = 1
    dilation: int = 1
    groups: int = 1
    has_bias: bool = False
    padding: Optional[int] = None

    def __post_init__(self):
        if self.groups < 1 or self.in_ch % self.groups or self.out_ch % self.groups:
            raise InvalidGroupsError(
                f"groups={self.groups} must divide in_ch={self.in_ch} and out_ch={self.out_ch}"
            )
        if self.dilation < 1 or self.stride < 1 or self.kernel < 1:
            raise ValueError("kernel, stride and dilation must be >= 1")

    @property
    def pad(self) -> int:
        return F.same_padding(self.kernel, self.dilation) if self.padding is None else self.padding

    def param_shapes(self) -> Dict[str, Shape]:
        shapes = {"weight": (self.out_ch, self.in_ch // self.groups, self.kernel, self.kernel)}
        if self.has_bias:
            shapes["bias"] = (1, self.out_ch, 1, 1)
        return shapes

    def out_shape(self, in_shapes):
        n, c, h, w = _single(in_shapes)
        if c != self.in_ch:
            raise ShapeMismatchError(f"conv expects {self.in_ch} channels, got {c}")
        oh = F.conv_output_size(h, self.kernel, self.stride, self.pad, self.dilation)
        ow = F.conv_output_size(w, self.kernel, self.stride, self.pad, self.dilation)
        if oh < 1 or ow < 1:
            raise ShapeMismatchError(f"conv output would be {oh}x{ow}")
        return (n, self.out_ch, oh, ow)

    def forward(self, inputs, params, training):
        (x,) = inputs
        if x.shape[1] != self.in_ch:
            raise ShapeMismatchError(f"conv expects {self.in_ch} channels, got {x.shape[1]}")
        return F.conv2d_forward(
            x, params["weight"], params.get("bias"), self.stride, self.pad, self.dilation, self.groups
        )

    def backward(self, grad, cache, params):
        gx, gw, gb = F.conv2d_backward(grad, cache)
        grads = {"weight": gw}
        if gb is not None:
            grads["bias"] = gb
        return [gx], grads


@dataclass(frozen=True)
class BatchNorm(LayerSpec):
    kind: ClassVar[str] = "batchnorm"

    ch: int
    eps: float = 1e-5
    momentum: float = 0.1

    def param_shapes(self):
        shape = (1, self.ch, 1, 1)
        return {"gamma": shape, "beta": shape, "running_mean": shape, "running_var": shape}

    def trainable(self):
        return ("gamma", "beta")

    def out_shape(self, in_shapes):
        shape = _single(in_shapes)
        if shape[1] != self.ch:
            raise ShapeMismatchError(f"batchnorm expects {self.ch} channels, got {shape[1]}")
        return shape

    def forward(self, inputs, params, training):
        (x,) = inputs
        return F.batchnorm_forward(
            x,
            params["gamma"],
            params["beta"],
            params["running_mean"],
            params["running_var"],
            self.eps,
            self.momentum,
            training,
        )

    def backward(self, grad, cache, params):
        gx, gg, gb = F.batchnorm_backward(grad, cache)
        return [gx], {"gamma": gg, "beta": gb}

    def buffer_updates(self, cache, params):
        stats = F.batchnorm_running_stats(params["running_mean"], params["running_var"], cache, self.momentum)
        if stats is None:
            return {}
        return {"running_mean": stats[0], "running_var": stats[1]}


@dataclass(frozen=True)
class Activation(LayerSpec):
    kind: ClassVar[str] = "activation"

    activation: ActivationKind = ActivationKind.RELU
    channels: int = 0
    alpha: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "activation", ActivationKind(self.activation))
        if self.activation is ActivationKind.PRELU and self.channels < 1:
            raise SlopeLengthMismatchError("PReLU needs a positive channel count for its slopes")

    def to_dict(self):
        data = super().to_dict()
        data["activation"] = self.activation.value
        return data

    def param_shapes(self):
        if self.activation is ActivationKind.PRELU:
            return {"slope": (1, self.channels, 1, 1)}
        return {}

    def out_shape(self, in_shapes):
        shape = _single(in_shapes)
        if self.activation is ActivationKind.PRELU and shape[1] != self.channels:
            raise SlopeLengthMismatchError(f"PReLU has {self.channels} slopes, input has {shape[1]} channels")
        return shape

    def forward(self, inputs, params, training):
        (x,) = inputs
        return F.activation_forward(x, self.activation, params.get("slope"), self.alpha)

    def backward(self, grad, cache, params):
        gx, gs = F.activation_backward(grad, cache)
        return [gx], ({} if gs is None else {"slope": gs})


@dataclass(frozen=True)
class BilinearUpsample(LayerSpec):
    kind: ClassVar[str] = "upsample"

    out_h: int
    out_w: int

    def out_shape(self, in_shapes):
        n, c, _, _ = _single(in_shapes)
        return (n, c, self.out_h, self.out_w)

    def forward(self, inputs, params, training):
        (x,) = inputs
        return F.upsample_forward(x, self.out_h, self.out_w)

    def backward(self, grad, cache, params):
        return [F.upsample_backward(grad, cache)], {}


@dataclass(frozen=True)
class GlobalAvgPool(LayerSpec):
    kind: ClassVar[str] = "gap"

    def out_shape(self, in_shapes):
        n, c, _, _ = _single(in_shapes)
        return (n, c, 1, 1)

    def forward(self, inputs, params, training):
        (x,) = inputs
        return F.global_avg_pool_forward(x)

    def backward(self, grad, cache, params):
        return [F.global_avg_pool_backward(grad, cache)], {}


@dataclass(frozen=True)
class Concat(LayerSpec):
    kind: ClassVar[str] = "concat"

    def out_shape(self, in_shapes):
        if len({(s[0], s[2], s[3]) for s in in_shapes}) != 1:
            raise ShapeMismatchError(f"concat inputs disagree: {in_shapes}")
        n, _, h, w = in_shapes[0]
        return (n, sum(s[1] for s in in_shapes), h, w)

    def forward(self, inputs, params, training):
        return F.concat_forward(inputs)

    def backward(self, grad, cache, params):
        return F.concat_backward(grad, cache), {}


@dataclass(frozen=True)
class Add(LayerSpec):
    """Elementwise sum; the residual connection of a bottleneck."""

    kind: ClassVar[str] = "add"

    def out_shape(self, in_shapes):
        if len(in_shapes) != 2 or in_shapes[0] != in_shapes[1]:
            raise ShapeMismatchError(f"add needs two equal shapes, got {in_shapes}")
        return in_shapes[0]

    def forward(self, inputs, params, training):
        a, b = inputs
        return (a + b).astype(np.float32, copy=False), None

    def backward(self, grad, cache, params):
        return [grad, grad], {}


LAYER_KINDS = {
    cls.kind: cls
    for cls in (Conv2d, BatchNorm, Activation, BilinearUpsample, GlobalAvgPool, Concat, Add)
}


@dataclass(frozen=True)
class Node:
    """One graph node: a unique name, its spec and the names it reads from."""

    name: str
    spec: LayerSpec
    inputs: Tuple[str, ...] = field(default_factory=tuple)

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "spec": self.spec.to_dict(), "inputs": list(self.inputs)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Node":
        return cls(data["name"], LayerSpec.from_dict(data["spec"]), tuple(data["inputs"]))
