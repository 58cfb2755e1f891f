"""
Exception hierarchy shared by every subpackage.

Argument and shape problems also derive from ``ValueError`` so callers that
only know the standard library still catch them.
"""


class EmberError(Exception):
    """Base class for all toolkit errors."""


# numerics
class MissingParamsError(EmberError, ValueError):
    """An I8 cast or tensor was requested without QuantParams."""


class CorruptFileError(EmberError, IOError):
    """A tensor or model file failed structural checks."""


class VersionMismatchError(EmberError, IOError):
    """A model file was written by an unsupported format version."""


# network
class ShapeMismatchError(EmberError, ValueError):
    """Tensor shapes do not agree with a layer contract."""


class InvalidGroupsError(EmberError, ValueError):
    """Channel counts are not divisible by the convolution group count."""


class SlopeLengthMismatchError(EmberError, ValueError):
    """PReLU slope vector length differs from the channel count."""


class ResidualShapeMismatchError(EmberError, ValueError):
    """A residual connection was requested between incompatible shapes."""


class TapMissingError(EmberError, KeyError):
    """A named feature tap is not present in the graph."""


class GraphValidationError(EmberError, ValueError):
    """Graph wiring is cyclic, dangling, or fails shape inference."""


# quantization
class EmptyCalibrationSetError(EmberError, ValueError):
    """Calibration was requested with no batches."""


class MissingStatsError(EmberError, KeyError):
    """An INT8 layer has no calibration statistics."""

    def __init__(self, layer: str):
        super().__init__(layer)
        self.layer = layer

    def __str__(self) -> str:
        return f"no calibration statistics for layer '{self.layer}'"


class UnknownLayerError(EmberError, KeyError):
    """A policy names a layer that does not exist in the graph."""

    def __init__(self, layer: str):
        super().__init__(layer)
        self.layer = layer

    def __str__(self) -> str:
        return f"unknown layer '{self.layer}'"


class PolicyError(EmberError, ValueError):
    """A policy file is malformed."""


# training
class NonFiniteGradientError(EmberError, FloatingPointError):
    """A gradient containing inf or NaN reached the optimizer."""


class EmptySplitError(EmberError, ValueError):
    """A dataset split needed for training or validation is empty."""


# metrics
class LabelOutOfRangeError(EmberError, ValueError):
    """A mask holds a class index outside [0, K)."""


class UndefinedMetricError(EmberError, ArithmeticError):
    """Every class has an empty union, so MIoU is undefined."""


class EmptyConfusionMatrixError(EmberError, ArithmeticError):
    """The confusion matrix holds no observations."""


class ZeroDurationError(EmberError, ZeroDivisionError):
    """Throughput was requested over a non-positive duration."""


# bench
class DoubleFreeError(EmberError, RuntimeError):
    """A tracked buffer was released twice or never allocated."""


# dataset
class MalformedHeaderError(EmberError, ValueError):
    """A netpbm header could not be parsed."""


class DimensionMismatchError(EmberError, ValueError):
    """Image and mask sizes differ."""


class MaskValueError(EmberError, ValueError):
    """A mask holds values other than 0 and 255 in strict mode."""


class FractionSumError(EmberError, ValueError):
    """Split fractions do not sum to one."""


# cli
class ConfigError(EmberError, ValueError):
    """A run config file or flag combination is invalid."""
