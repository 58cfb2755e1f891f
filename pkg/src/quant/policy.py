"""
Selective-precision policy.

A policy assigns every graph node one precision. Resolution order:
explicit ``[layers]`` entries, then the INT8-forced set (residual adds,
declared sensitive and non-friendly layers, auto-flagged layers when the
policy says so), then the fallback precision.

Policy files are INI::

    [layers]
    decoder.classifier = fp32

    [granularity]
    weights = per_channel
    activations = per_tensor

    [calibration]
    method = entropy
    bins = 2048

    [int8_forced]
    residual = true
    sensitive = block1.project.conv, aspp.fuse.conv
    non_friendly =

    [defaults]
    fallback = fp16
    auto_flag_sqnr_db = 20
    auto_flag_action = report
"""
import configparser
from pathlib import Path
from typing import Dict, Iterable, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from src.errors import PolicyError, UnknownLayerError
from src.network.graph import NetworkGraph, Precision
from src.network.layers import Add
from src.numerics.quant import Granularity
from src.quant.calibration import DEFAULT_BINS, CalibMethod, parse_method

_SECTIONS = {"layers", "granularity", "calibration", "int8_forced", "defaults"}


def _split_names(value: str) -> Tuple[str, ...]:
    return tuple(name.strip() for name in value.split(",") if name.strip())


class QuantPolicy(BaseModel):
    model_config = ConfigDict(frozen=True)

    layers: Dict[str, Precision] = Field(default_factory=dict)
    weight_granularity: Granularity = Granularity.PER_CHANNEL
    activation_granularity: Granularity = Granularity.PER_TENSOR
    symmetric_activations: bool = False
    calibration: str = "minmax"
    decay: float = Field(default=0.99, gt=0, lt=1)
    percentile: float = Field(default=0.9999, gt=0, le=1)
    bins: int = Field(default=DEFAULT_BINS, ge=16)
    int8_residual: bool = True
    sensitive: Tuple[str, ...] = ()
    non_friendly: Tuple[str, ...] = ()
    fallback: Precision = Precision.FP16
    auto_flag_sqnr_db: float = 20.0
    auto_flag_action: Literal["report", "int8", "fp16"] = "report"

    @field_validator("calibration")
    @classmethod
    def _known_method(cls, value: str) -> str:
        parse_method(value)
        return value.strip().lower()

    @classmethod
    def uniform(cls, precision: Union[Precision, str]) -> "QuantPolicy":
        """Every node at one precision."""
        return cls(fallback=Precision(precision), int8_residual=False)

    @classmethod
    def from_ini(cls, text: str) -> "QuantPolicy":
        parser = configparser.ConfigParser()
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise PolicyError(f"unreadable policy file: {exc}") from exc
        unknown = set(parser.sections()) - _SECTIONS
        if unknown:
            raise PolicyError(f"unknown policy sections {sorted(unknown)}")

        values: Dict[str, object] = {}
        if parser.has_section("layers"):
            values["layers"] = dict(parser.items("layers"))
        if parser.has_section("granularity"):
            section = parser["granularity"]
            if "weights" in section:
                values["weight_granularity"] = section["weights"]
            if "activations" in section:
                values["activation_granularity"] = section["activations"]
            if "symmetric_activations" in section:
                values["symmetric_activations"] = section.getboolean("symmetric_activations")
        if parser.has_section("calibration"):
            section = parser["calibration"]
            for key in ("method", "decay", "percentile", "bins"):
                if key in section:
                    values["calibration" if key == "method" else key] = section[key]
        if parser.has_section("int8_forced"):
            section = parser["int8_forced"]
            if "residual" in section:
                values["int8_residual"] = section.getboolean("residual")
            values["sensitive"] = _split_names(section.get("sensitive", ""))
            values["non_friendly"] = _split_names(section.get("non_friendly", ""))
        if parser.has_section("defaults"):
            section = parser["defaults"]
            for key in ("fallback", "auto_flag_sqnr_db", "auto_flag_action"):
                if key in section:
                    values[key] = section[key]
        try:
            return cls(**values)
        except (ValidationError, ValueError) as exc:
            raise PolicyError(f"invalid policy: {exc}") from exc

    @classmethod
    def load(cls, path: Union[str, Path]) -> "QuantPolicy":
        return cls.from_ini(Path(path).read_text(encoding="utf-8"))

    def method(self) -> CalibMethod:
        return parse_method(self.calibration, self.decay, self.percentile, self.bins)

    def resolve(
        self, graph: NetworkGraph, auto_flagged: Iterable[str] = ()
    ) -> Dict[str, Tuple[Precision, str]]:
        """
        Precision and the reason for it, for every node of ``graph``.

        Raises:
            UnknownLayerError: the policy names a layer the graph does not have.
            PolicyError: a layer is given two different precisions.
        """
        for name in (*self.layers, *self.sensitive, *self.non_friendly):
            if name not in graph:
                raise UnknownLayerError(name)
        forced: Dict[str, str] = {}
        for name in self.sensitive:
            forced[name] = "sensitive"
        for name in self.non_friendly:
            forced.setdefault(name, "non_friendly")
        conflicts = [n for n in forced if n in self.layers and self.layers[n] is not Precision.INT8]
        if conflicts:
            raise PolicyError(f"layers {conflicts} are INT8-forced but listed with another precision")

        flagged = set(auto_flagged)
        resolved: Dict[str, Tuple[Precision, str]] = {}
        for node in graph.nodes:
            if node.name in self.layers:
                resolved[node.name] = (self.layers[node.name], "explicit")
            elif node.name in forced:
                resolved[node.name] = (Precision.INT8, forced[node.name])
            elif self.int8_residual and isinstance(node.spec, Add):
                resolved[node.name] = (Precision.INT8, "residual")
            elif node.name in flagged and self.auto_flag_action != "report":
                resolved[node.name] = (Precision(self.auto_flag_action), "auto_flag")
            else:
                resolved[node.name] = (self.fallback, "fallback")
        return resolved

    def to_ini(self) -> str:
        forced = {
            "residual": str(self.int8_residual).lower(),
            "sensitive": ", ".join(self.sensitive),
            "non_friendly": ", ".join(self.non_friendly),
        }
        parser = configparser.ConfigParser()
        parser.optionxform = str
        parser["layers"] = {name: p.value for name, p in self.layers.items()}
        parser["granularity"] = {
            "weights": self.weight_granularity.value,
            "activations": self.activation_granularity.value,
            "symmetric_activations": str(self.symmetric_activations).lower(),
        }
        parser["calibration"] = {
            "method": self.calibration,
            "decay": str(self.decay),
            "percentile": str(self.percentile),
            "bins": str(self.bins),
        }
        parser["int8_forced"] = forced
        parser["defaults"] = {
            "fallback": self.fallback.value,
            "auto_flag_sqnr_db": str(self.auto_flag_sqnr_db),
            "auto_flag_action": self.auto_flag_action,
        }
        lines = []
        for section in parser.sections():
            lines.append(f"[{section}]")
            lines += [f"{k} = {v}" for k, v in parser[section].items()]
            lines.append("")
        return "\n".join(lines)


def default_policy() -> QuantPolicy:
    """FP16 everywhere except residual adds, which are INT8."""
    return QuantPolicy()


def load_policy(path: Optional[Union[str, Path]]) -> QuantPolicy:
    return default_policy() if path is None else QuantPolicy.load(path)
