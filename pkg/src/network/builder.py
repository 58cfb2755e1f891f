"""
Model construction: MobileNetV3 backbone, ASPP head and DeepLabV3+ decoder.

``build_model(config)`` returns a validated NetworkGraph with three named
taps (``low_level``, ``mid_level``, ``high_level``). The standalone
``bottleneck_forward`` / ``aspp_forward`` / ``decoder_forward`` helpers run
one block on its own, wired exactly like the block inside the full model.
"""
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from src.errors import ResidualShapeMismatchError, ShapeMismatchError
from src.network.functional import ActivationKind
from src.network.graph import INPUT, NetworkGraph
from src.network.layers import (
    Activation,
    Add,
    BatchNorm,
    BilinearUpsample,
    Concat,
    Conv2d,
    GlobalAvgPool,
    LayerSpec,
    Node,
    Shape,
)
from src.numerics.tensor import Tensor


class BottleneckSpec(NamedTuple):
    expand_ratio: float
    out_ch: int
    stride: int


# MobileNetV3-Large without squeeze-excite: (expansion, output channels, stride)
MOBILENET_V3_LARGE: Tuple[BottleneckSpec, ...] = tuple(
    BottleneckSpec(*row)
    for row in (
        (1, 16, 1),
        (4, 24, 2),
        (3, 24, 1),
        (3, 40, 2),
        (3, 40, 1),
        (3, 40, 1),
        (6, 80, 2),
        (2.5, 80, 1),
        (2.3, 80, 1),
        (2.3, 80, 1),
        (6, 112, 1),
        (6, 112, 1),
        (6, 160, 2),
        (6, 160, 1),
        (6, 160, 1),
    )
)

DESK_SCHEDULE: Tuple[BottleneckSpec, ...] = (
    BottleneckSpec(1, 16, 1),
    BottleneckSpec(4, 24, 2),
    BottleneckSpec(3, 40, 2),
)


def make_divisible(value: float, divisor: int = 8, min_value: Optional[int] = None) -> int:
    """Round a channel count to a multiple of ``divisor`` without dropping more than 10%."""
    min_value = divisor if min_value is None else min_value
    rounded = max(min_value, int(value + divisor / 2) // divisor * divisor)
    if rounded < 0.9 * value:
        rounded += divisor
    return rounded


def bottleneck_schedule(count: int) -> Tuple[BottleneckSpec, ...]:
    if count <= len(DESK_SCHEDULE):
        return DESK_SCHEDULE[:count]
    if count > len(MOBILENET_V3_LARGE):
        raise ValueError(f"at most {len(MOBILENET_V3_LARGE)} bottlenecks are defined, got {count}")
    return MOBILENET_V3_LARGE[:count]


class ModelConfig(BaseModel):
    """Hyperparameters of the segmentation network."""

    model_config = ConfigDict(frozen=True)

    input_size: Tuple[int, int] = (64, 64)
    in_channels: int = Field(default=3, ge=1)
    stem_filters: int = Field(default=16, ge=1)
    bottlenecks: int = Field(default=3, ge=1, le=len(MOBILENET_V3_LARGE))
    width_multiplier: float = Field(default=0.25, gt=0)
    aspp_rates: Tuple[int, ...] = (6, 12, 18)
    num_classes: int = 2
    activation: ActivationKind = ActivationKind.RELU
    elu_alpha: float = Field(default=1.0, gt=0)
    aspp_channels: int = Field(default=16, ge=1)
    decoder_low_channels: int = Field(default=8, ge=1)
    seed: int = 0

    @field_validator("input_size")
    @classmethod
    def _positive_size(cls, value):
        if min(value) < 8:
            raise ValueError(f"input size must be at least 8x8, got {value}")
        return value

    @field_validator("aspp_rates")
    @classmethod
    def _increasing_rates(cls, value):
        if not value or value[0] < 1 or any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError(f"ASPP dilation rates must be >= 1 and strictly increasing, got {value}")
        return value

    @field_validator("num_classes")
    @classmethod
    def _two_classes(cls, value):
        if value != 2:
            raise ValueError("the segmentation head predicts exactly 2 classes (background, fire)")
        return value

    @classmethod
    def full(cls, **overrides) -> "ModelConfig":
        """The 15-bottleneck configuration at 512x512."""
        values = dict(
            input_size=(512, 512),
            bottlenecks=15,
            width_multiplier=1.0,
            aspp_channels=256,
            decoder_low_channels=48,
        )
        values.update(overrides)
        return cls(**values)

    def channels(self, value: float) -> int:
        return make_divisible(value * self.width_multiplier)


class GraphBuilder:
    """Appends nodes while tracking output shapes so channel counts are always known."""

    def __init__(self, input_shapes: Mapping[str, Tuple[int, int, int]]):
        self.nodes: List[Node] = []
        self.shapes: Dict[str, Shape] = {name: (1, *shape) for name, shape in input_shapes.items()}

    def add(self, name: str, spec: LayerSpec, *inputs: str) -> str:
        self.shapes[name] = spec.out_shape([self.shapes[src] for src in inputs])
        self.nodes.append(Node(name, spec, tuple(inputs)))
        return name

    def channels(self, name: str) -> int:
        return self.shapes[name][1]

    def spatial(self, name: str) -> Tuple[int, int]:
        return self.shapes[name][2], self.shapes[name][3]

    def activation(self, name: str, src: str, kind: ActivationKind, alpha: float = 1.0) -> str:
        channels = self.channels(src) if kind is ActivationKind.PRELU else 0
        return self.add(name, Activation(kind, channels, alpha), src)

    def conv_bn_act(
        self,
        prefix: str,
        src: str,
        out_ch: int,
        kernel: int = 1,
        stride: int = 1,
        dilation: int = 1,
        groups: int = 1,
        act: Optional[ActivationKind] = ActivationKind.RELU,
        alpha: float = 1.0,
    ) -> str:
        conv = self.add(
            f"{prefix}.conv", Conv2d(self.channels(src), out_ch, kernel, stride, dilation, groups), src
        )
        out = self.add(f"{prefix}.bn", BatchNorm(out_ch), conv)
        if act is not None:
            out = self.activation(f"{prefix}.act", out, act, alpha)
        return out


def add_bottleneck(
    b: GraphBuilder,
    prefix: str,
    src: str,
    expand_ratio: float,
    out_ch: int,
    stride: int,
    use_residual: bool,
    activation: ActivationKind = ActivationKind.RELU,
    alpha: float = 1.0,
) -> str:
    in_ch = b.channels(src)
    if use_residual and (stride != 1 or in_ch != out_ch):
        raise ResidualShapeMismatchError(
            f"{prefix}: residual needs stride 1 and in_ch == out_ch, got stride {stride}, {in_ch} -> {out_ch}"
        )
    hidden = make_divisible(in_ch * expand_ratio)
    x = b.conv_bn_act(f"{prefix}.expand", src, hidden, act=activation, alpha=alpha)
    x = b.conv_bn_act(f"{prefix}.dw", x, hidden, 3, stride, groups=hidden, act=activation, alpha=alpha)
    x = b.conv_bn_act(f"{prefix}.project", x, out_ch, act=None)
    if use_residual:
        x = b.add(f"{prefix}.add", Add(), x, src)
    return x


def add_aspp(b: GraphBuilder, src: str, rates: Sequence[int], channels: int, prefix: str = "aspp") -> str:
    h, w = b.spatial(src)
    branches = [b.conv_bn_act(f"{prefix}.b0", src, channels)]
    for i, rate in enumerate(rates, start=1):
        branches.append(b.conv_bn_act(f"{prefix}.b{i}", src, channels, 3, dilation=rate))
    pooled = b.add(f"{prefix}.pool", GlobalAvgPool(), src)
    pooled = b.add(f"{prefix}.pool_conv", Conv2d(b.channels(src), channels, has_bias=True), pooled)
    pooled = b.activation(f"{prefix}.pool_act", pooled, ActivationKind.RELU)
    branches.append(b.add(f"{prefix}.pool_up", BilinearUpsample(h, w), pooled))
    cat = b.add(f"{prefix}.concat", Concat(), *branches)
    return b.conv_bn_act(f"{prefix}.fuse", cat, channels)


def add_decoder(
    b: GraphBuilder,
    deep: str,
    shallow: str,
    out_size: Tuple[int, int],
    low_channels: int,
    num_classes: int = 2,
    prefix: str = "decoder",
) -> str:
    sh, sw = b.spatial(shallow)
    dh, dw = b.spatial(deep)
    if sh < dh or sw < dw:
        raise ShapeMismatchError(f"shallow tap {sh}x{sw} is smaller than deep features {dh}x{dw}")
    low = b.conv_bn_act(f"{prefix}.low", shallow, low_channels)
    up = b.add(f"{prefix}.up", BilinearUpsample(sh, sw), deep)
    cat = b.add(f"{prefix}.concat", Concat(), up, low)
    logits = b.add(
        f"{prefix}.classifier", Conv2d(b.channels(cat), num_classes, kernel=3, has_bias=True), cat
    )
    return b.add(f"{prefix}.out", BilinearUpsample(*out_size), logits)


def resolution_taps(b: GraphBuilder, backbone: Sequence[str]) -> Dict[str, str]:
    """Last node of each of the three deepest resolution groups; shallow taps alias when fewer exist."""
    groups: List[str] = []
    previous = None
    for name in backbone:
        size = b.spatial(name)
        if size != previous:
            groups.append(name)
            previous = size
        else:
            groups[-1] = name
    deepest = groups[-3:]
    while len(deepest) < 3:
        deepest.insert(0, deepest[0])
    return dict(zip(("low_level", "mid_level", "high_level"), deepest))


def init_params(nodes: Sequence[Node], seed: int = 0) -> Dict[str, Tensor]:
    """Kaiming-uniform conv weights, zero biases, identity BatchNorm, PReLU slopes of 0.25."""
    rng = np.random.default_rng(seed)
    params: Dict[str, Tensor] = {}
    for node in nodes:
        for suffix, shape in node.spec.param_shapes().items():
            if suffix == "weight":
                fan_in = shape[1] * shape[2] * shape[3]
                bound = np.sqrt(6.0 / fan_in)
                value = rng.uniform(-bound, bound, size=shape)
            elif suffix in ("gamma", "running_var"):
                value = np.ones(shape)
            elif suffix == "slope":
                value = np.full(shape, 0.25)
            else:
                value = np.zeros(shape)
            params[f"{node.name}.{suffix}"] = Tensor(value.astype(np.float32))
    return params


def build_model(config: Optional[ModelConfig] = None) -> NetworkGraph:
    """Build and validate the full segmentation graph for ``config``."""
    config = config or ModelConfig()
    h, w = config.input_size
    b = GraphBuilder({INPUT: (config.in_channels, h, w)})

    x = b.conv_bn_act(
        "stem", INPUT, config.channels(config.stem_filters), 3, 2, act=ActivationKind.HARDSWISH
    )
    backbone = [x]
    for i, row in enumerate(bottleneck_schedule(config.bottlenecks)):
        out_ch = config.channels(row.out_ch)
        residual = row.stride == 1 and b.channels(x) == out_ch
        x = add_bottleneck(
            b, f"block{i}", x, row.expand_ratio, out_ch, row.stride, residual, config.activation, config.elu_alpha
        )
        backbone.append(x)

    taps = resolution_taps(b, backbone)
    head = add_aspp(b, taps["high_level"], config.aspp_rates, config.aspp_channels)
    out = add_decoder(
        b, head, taps["low_level"], (h, w), config.decoder_low_channels, config.num_classes
    )
    graph = NetworkGraph(
        b.nodes,
        (config.in_channels, h, w),
        out,
        taps,
        init_params(b.nodes, config.seed),
        config=config,
    )
    graph.validate()
    return graph


def model_forward(graph: NetworkGraph, x) -> np.ndarray:
    """Inference logits (n x 2 x H x W)."""
    return graph.forward(x).output


def bottleneck_graph(
    in_shape: Tuple[int, int, int],
    expand_ratio: float,
    out_ch: int,
    stride: int,
    use_residual: bool,
    activation: ActivationKind = ActivationKind.RELU,
    seed: int = 0,
) -> NetworkGraph:
    b = GraphBuilder({INPUT: in_shape})
    out = add_bottleneck(b, "block", INPUT, expand_ratio, out_ch, stride, use_residual, ActivationKind(activation))
    graph = NetworkGraph(b.nodes, in_shape, out, params=init_params(b.nodes, seed))
    graph.validate()
    return graph


def bottleneck_forward(
    x: np.ndarray,
    expand_ratio: float,
    out_ch: int,
    stride: int,
    use_residual: bool,
    activation: ActivationKind = ActivationKind.RELU,
    seed: int = 0,
) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    graph = bottleneck_graph(x.shape[1:], expand_ratio, out_ch, stride, use_residual, activation, seed)
    return graph.forward(x).output


def aspp_graph(in_shape: Tuple[int, int, int], rates: Sequence[int], channels: int, seed: int = 0) -> NetworkGraph:
    b = GraphBuilder({INPUT: in_shape})
    out = add_aspp(b, INPUT, rates, channels)
    graph = NetworkGraph(b.nodes, in_shape, out, params=init_params(b.nodes, seed))
    graph.validate()
    return graph


def aspp_forward(x: np.ndarray, rates: Sequence[int] = (6, 12, 18), channels: int = 16, seed: int = 0) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    return aspp_graph(x.shape[1:], rates, channels, seed).forward(x).output


def decoder_forward(
    deep: np.ndarray,
    shallow: np.ndarray,
    out_size: Tuple[int, int],
    params: Optional[Mapping[str, np.ndarray]] = None,
    low_channels: int = 8,
    num_classes: int = 2,
    seed: int = 0,
) -> np.ndarray:
    """
    Run the decoder on a deep feature map and a shallow tap.

    ``params`` uses the same keys as the decoder inside a built model
    (``decoder.low.conv.weight``, ``decoder.classifier.bias``, ...) so a
    model's own parameters can be passed straight through.
    """
    deep = np.asarray(deep, dtype=np.float32)
    shallow = np.asarray(shallow, dtype=np.float32)
    b = GraphBuilder({"deep": deep.shape[1:], "shallow": shallow.shape[1:]})
    add_decoder(b, "deep", "shallow", out_size, low_channels, num_classes)
    if params is None:
        params = {k: t.data for k, t in init_params(b.nodes, seed).items()}
    values = {"deep": deep, "shallow": shallow}
    for node in b.nodes:
        node_params = {s: params[f"{node.name}.{s}"] for s in node.spec.param_shapes()}
        values[node.name], _ = node.spec.forward([values[s] for s in node.inputs], node_params, False)
    return values[b.nodes[-1].name]
