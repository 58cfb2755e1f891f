"""
Activation range calibration.

Statistics are gathered in two passes over the calibration batches: the
first records running and per-batch extrema, the second fills fixed-range
histograms (signed over [min, max], absolute over [0, max|x|]). Scales are
then derived with one of four methods: MinMax, MovingAvgMinMax, Percentile
or Entropy (KL-divergence threshold search).
"""
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.errors import EmptyCalibrationSetError
from src.log_helper import get_logger
from src.network.graph import NetworkGraph
from src.numerics.quant import INT8_MAX, INT8_MIN, Granularity, QuantParams

_logger = get_logger(__name__)

DEFAULT_BINS = 2048
QUANTIZED_LEVELS = 128
KL_SMOOTHING = 1e-9


@dataclass(frozen=True)
class MinMax:
    name = "minmax"


@dataclass(frozen=True)
class MovingAvgMinMax:
    decay: float = 0.99
    name = "moving_avg_minmax"

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise ValueError(f"decay must be in (0, 1), got {self.decay}")


@dataclass(frozen=True)
class Percentile:
    p: float = 0.9999
    name = "percentile"

    def __post_init__(self):
        if not 0.0 < self.p <= 1.0:
            raise ValueError(f"percentile must be in (0, 1], got {self.p}")


@dataclass(frozen=True)
class Entropy:
    bins: int = DEFAULT_BINS
    name = "entropy"

    def __post_init__(self):
        if self.bins < 16:
            raise ValueError(f"entropy calibration needs at least 16 bins, got {self.bins}")


CalibMethod = Union[MinMax, MovingAvgMinMax, Percentile, Entropy]


def parse_method(name: str, decay: float = 0.99, percentile: float = 0.9999, bins: int = DEFAULT_BINS) -> CalibMethod:
    methods = {
        "minmax": lambda: MinMax(),
        "moving_avg_minmax": lambda: MovingAvgMinMax(decay),
        "percentile": lambda: Percentile(percentile),
        "entropy": lambda: Entropy(bins),
    }
    key = name.strip().lower()
    if key not in methods:
        raise ValueError(f"unknown calibration method '{name}' (expected one of {sorted(methods)})")
    return methods[key]()


@dataclass
class ActivationStats:
    """Observed range and histograms of one layer's output."""

    bins: int = DEFAULT_BINS
    min: float = float("inf")
    max: float = float("-inf")
    count: int = 0
    batch_min: List[float] = field(default_factory=list)
    batch_max: List[float] = field(default_factory=list)
    channel_absmax: Optional[np.ndarray] = None
    hist: Optional[np.ndarray] = None
    edges: Optional[np.ndarray] = None
    abs_hist: Optional[np.ndarray] = None
    abs_edges: Optional[np.ndarray] = None

    @property
    def amax(self) -> float:
        return max(abs(self.min), abs(self.max))

    @property
    def empty(self) -> bool:
        return self.count == 0

    def observe(self, x: np.ndarray) -> None:
        """First pass: running and per-batch extrema."""
        values = np.asarray(x, dtype=np.float64)
        finite = values[np.isfinite(values)]
        if finite.size == 0:
            return
        lo, hi = float(finite.min()), float(finite.max())
        self.min = min(self.min, lo)
        self.max = max(self.max, hi)
        self.count += int(finite.size)
        self.batch_min.append(lo)
        self.batch_max.append(hi)
        if values.ndim == 4:
            per_channel = np.nan_to_num(np.abs(values), nan=0.0, posinf=0.0).max(axis=(0, 2, 3))
            self.channel_absmax = (
                per_channel if self.channel_absmax is None else np.maximum(self.channel_absmax, per_channel)
            )

    def observe_histogram(self, x: np.ndarray) -> None:
        """Second pass: histograms over the range fixed by the first pass."""
        values = np.asarray(x, dtype=np.float64)
        finite = values[np.isfinite(values)]
        hist, edges = np.histogram(finite, bins=self.bins, range=(self.min, self.max))
        abs_hist, abs_edges = np.histogram(np.abs(finite), bins=self.bins, range=(0.0, self.amax))
        if self.hist is None:
            self.hist, self.edges = hist, edges
            self.abs_hist, self.abs_edges = abs_hist, abs_edges
        else:
            self.hist += hist
            self.abs_hist += abs_hist


def collect_stats(
    graph: NetworkGraph,
    batches: Iterable[np.ndarray],
    n_batches: int = 100,
    bins: int = DEFAULT_BINS,
    layers: Optional[Sequence[str]] = None,
) -> Dict[str, ActivationStats]:
    """
    Record output statistics of every layer (or of ``layers``) over up to ``n_batches`` batches.

    Calibration should run on a frozen graph so the recorded layer names
    match the graph that is quantized afterwards.

    Raises:
        EmptyCalibrationSetError: no batches were supplied.
    """
    if n_batches < 1:
        raise EmptyCalibrationSetError(f"n_batches must be >= 1, got {n_batches}")
    data = []
    for batch in batches:
        if len(data) >= n_batches:
            break
        data.append(np.asarray(batch, dtype=np.float32))
    if not data:
        raise EmptyCalibrationSetError("no calibration batches")

    wanted = set(graph.node_names if layers is None else layers)
    stats = {name: ActivationStats(bins=bins) for name in graph.node_names if name in wanted}

    def first_pass(name: str, out: np.ndarray) -> None:
        if name in stats:
            stats[name].observe(out)

    def second_pass(name: str, out: np.ndarray) -> None:
        if name in stats and not stats[name].empty:
            stats[name].observe_histogram(out)

    for batch_id, batch in enumerate(data):
        graph.forward(batch, observer=first_pass)
        if batch_id % 10 == 0:
            _logger.info("calibration pass 1, batch %d", batch_id)
    for batch in data:
        graph.forward(batch, observer=second_pass)
    _logger.info("collected statistics for %d layers over %d batches", len(stats), len(data))
    for name, s in stats.items():
        _logger.debug("%s: range [%g, %g] over %d values", name, s.min, s.max, s.count)
    return stats


def _smooth(p: np.ndarray, eps: float = KL_SMOOTHING) -> np.ndarray:
    p = p + eps * (p == 0)
    return p / p.sum()


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) of two unnormalised histograms after zero-bin smoothing."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.sum() <= 0 or q.sum() <= 0:
        return float("inf")
    p = _smooth(p / p.sum())
    q = _smooth(q / q.sum())
    return float(np.sum(p * np.log(p / q)))


def _quantize_distribution(sliced: np.ndarray, reference: np.ndarray, levels: int) -> np.ndarray:
    """Merge ``sliced`` into ``levels`` groups and spread each group back over its non-empty bins."""
    size = sliced.size
    merged = size // levels
    q = np.zeros(size, dtype=np.float64)
    for j in range(levels):
        start = j * merged
        stop = size if j == levels - 1 else start + merged
        nonzero = reference[start:stop] != 0
        n = int(nonzero.sum())
        if n:
            q[start:stop] = np.where(nonzero, sliced[start:stop].sum() / n, 0.0)
    return q


def kl_scan(abs_hist: np.ndarray, levels: int = QUANTIZED_LEVELS) -> Tuple[int, np.ndarray]:
    """
    KL divergence for every candidate clip index ``i`` in ``[levels, bins]``.

    For candidate ``i`` the reference distribution is ``hist[:i]`` with all
    outlier mass folded into its last bin; the candidate distribution is
    ``hist[:i]`` quantized to ``levels`` groups.

    Returns:
        The first index reaching the strict minimum, and the divergence per candidate.
    """
    hist = np.asarray(abs_hist, dtype=np.float64)
    bins = hist.size
    levels = min(levels, bins)
    candidates = np.arange(levels, bins + 1)
    divergences = np.empty(candidates.size, dtype=np.float64)
    for k, i in enumerate(candidates):
        sliced = hist[:i]
        reference = sliced.copy()
        reference[-1] += hist[i:].sum()
        q = _quantize_distribution(sliced, reference, levels)
        divergences[k] = kl_divergence(reference, q)
    best = int(np.argmin(divergences))
    return int(candidates[best]), divergences


def entropy_threshold(abs_hist: np.ndarray, abs_edges: np.ndarray, levels: int = QUANTIZED_LEVELS) -> float:
    index, divergences = kl_scan(abs_hist, levels)
    _logger.debug("KL minimum %.6g at bin %d of %d", divergences.min(), index, len(abs_hist))
    return float(abs_edges[index])


def _hist_quantile(hist: np.ndarray, edges: np.ndarray, q: float) -> float:
    """Upper edge of the first bin whose cumulative mass reaches ``q`` of the total."""
    cdf = np.cumsum(hist, dtype=np.float64)
    target = q * cdf[-1]
    idx = int(np.searchsorted(cdf, target, side="left"))
    return float(edges[min(idx + 1, len(edges) - 1)])


@dataclass(frozen=True)
class ScaleResult:
    params: QuantParams
    low: float
    high: float
    degenerate: bool = False


def calibration_range(stats: ActivationStats, method: CalibMethod, symmetric: bool) -> Tuple[float, float]:
    """Real interval ``[low, high]`` to be covered by the quantization grid."""
    if isinstance(method, MovingAvgMinMax):
        lo, hi = stats.batch_min[0], stats.batch_max[0]
        for bmin, bmax in zip(stats.batch_min[1:], stats.batch_max[1:]):
            lo = method.decay * lo + (1.0 - method.decay) * bmin
            hi = method.decay * hi + (1.0 - method.decay) * bmax
        return lo, hi
    if isinstance(method, Percentile) and method.p < 1.0:
        if symmetric:
            t = _hist_quantile(stats.abs_hist, stats.abs_edges, method.p)
            return -t, t
        lo = _hist_quantile(stats.hist, stats.edges, 1.0 - method.p)
        hi = _hist_quantile(stats.hist, stats.edges, method.p)
        return min(lo, hi), max(lo, hi)
    if isinstance(method, Entropy):
        t = entropy_threshold(stats.abs_hist, stats.abs_edges)
        return max(stats.min, -t), min(stats.max, t)
    return stats.min, stats.max


def compute_scale(
    stats: ActivationStats,
    method: Optional[CalibMethod] = None,
    symmetric: bool = False,
    granularity: Granularity = Granularity.PER_TENSOR,
    layer: str = "",
) -> ScaleResult:
    """
    Turn statistics into int8 QuantParams.

    Symmetric targets use s = max(|low|, |high|) / 127 and z = 0; asymmetric
    targets widen the range to include zero and use s = (high - low) / 255,
    z = round(qmin - low / s). A degenerate range (min == max) yields s = 1,
    z = 0 and ``degenerate=True``.

    Raises:
        EmptyCalibrationSetError: the statistics hold no observations.
    """
    method = method or MinMax()
    if stats.empty:
        raise EmptyCalibrationSetError(f"no observations for layer '{layer}'")

    if stats.min == stats.max or (symmetric and stats.amax == 0.0):
        _logger.warning("degenerate range [%g, %g] for layer '%s'; using scale 1", stats.min, stats.max, layer)
        if symmetric:
            params = QuantParams.symmetric_int8((1.0,))
        else:
            params = QuantParams.asymmetric_int8(1.0, 0)
        return ScaleResult(params, stats.min, stats.max, degenerate=True)

    if granularity is Granularity.PER_CHANNEL:
        if not isinstance(method, MinMax):
            _logger.warning("per-channel activations use MinMax ranges; '%s' ignored for '%s'", method.name, layer)
        absmax = np.where(stats.channel_absmax > 0, stats.channel_absmax, 1.0)
        params = QuantParams.symmetric_int8(tuple(absmax / INT8_MAX), Granularity.PER_CHANNEL, axis=1)
        return ScaleResult(params, -stats.amax, stats.amax)

    low, high = calibration_range(stats, method, symmetric)
    if symmetric and max(abs(low), abs(high)) == 0.0:
        low, high = -stats.amax, stats.amax
    params = params_from_range(low, high, symmetric)
    if symmetric:
        t = max(abs(low), abs(high))
        return ScaleResult(params, -t, t)
    return ScaleResult(params, min(low, 0.0), max(high, 0.0))


def params_from_range(low: float, high: float, symmetric: bool) -> QuantParams:
    """Per-tensor int8 params covering ``[low, high]`` (asymmetric ranges are widened to include zero)."""
    if symmetric:
        t = max(abs(low), abs(high))
        return QuantParams.symmetric_int8((t / INT8_MAX if t > 0 else 1.0,))
    low, high = min(low, 0.0), max(high, 0.0)
    if high == low:
        return QuantParams.asymmetric_int8(1.0, 0)
    qmin, qmax = INT8_MIN, INT8_MAX
    scale = (high - low) / (qmax - qmin)
    zero_point = int(np.clip(np.rint(qmin - low / scale), qmin, qmax))
    return QuantParams.asymmetric_int8(scale, zero_point)
