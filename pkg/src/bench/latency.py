"""
Latency / throughput batch sweeps and allocation profiling.

Wall times are measured with ``time.perf_counter`` around each call after
``warmup`` discarded iterations. Sweep points run one at a time; the only
concurrent mode is ``parallel_throughput`` where each worker owns a private
arena.
"""
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator

from src.log_helper import get_logger
from src.network.graph import NetworkGraph

from .allocator import AllocTimeline, SequenceCounter, TrackedArena, merge_timelines
from .base import GraphTarget, InferenceTarget

_logger = get_logger(__name__)

DEFAULT_BATCH_SIZES = (2, 4, 8, 16, 32)


class BenchConfig(BaseModel):
    batch_sizes: Tuple[int, ...] = DEFAULT_BATCH_SIZES
    warmup: int = Field(default=10, ge=0)
    measured: int = Field(default=100, ge=2)
    input_shape: Tuple[int, int, int] = (3, 64, 64)
    variants: Tuple[str, ...] = ("fp32", "quantized")
    seed: int = 0
    memory_batch: int = Field(default=2, ge=1)
    series_points: int = Field(default=512, ge=2)

    @field_validator("batch_sizes")
    @classmethod
    def _valid_batches(cls, value):
        if not value:
            raise ValueError("batch_sizes must not be empty")
        if any(b < 1 for b in value):
            raise ValueError("every batch size must be >= 1")
        return tuple(value)

    def batch(self, size: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, size])
        return rng.random((size, *self.input_shape), dtype=np.float32)


class LatencyStats(BaseModel):
    batch: int
    mean_ms: float
    std_ms: float
    p50: float
    p99: float
    throughput: float
    iterations: int

    @classmethod
    def from_times(cls, batch: int, seconds: Sequence[float]) -> "LatencyStats":
        ms = np.asarray(seconds, dtype=np.float64) * 1000.0
        total = float(np.sum(seconds))
        return cls(
            batch=batch,
            mean_ms=float(ms.mean()),
            std_ms=float(ms.std(ddof=1)) if len(ms) > 1 else 0.0,
            p50=float(np.percentile(ms, 50)),
            p99=float(np.percentile(ms, 99)),
            throughput=batch * len(ms) / total if total > 0 else float("inf"),
            iterations=len(ms),
        )


class SweepPoint(BaseModel):
    batch: int
    mean_ms: Optional[float] = None
    std_ms: Optional[float] = None
    p50: Optional[float] = None
    p99: Optional[float] = None
    throughput: Optional[float] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


class VariantResult(BaseModel):
    name: str
    model_bytes: int = 0
    points: List[SweepPoint] = Field(default_factory=list)

    def best(self) -> Optional[SweepPoint]:
        good = [p for p in self.points if p.ok]
        return max(good, key=lambda p: p.throughput) if good else None


class MemoryProfile(BaseModel):
    mode: str = "inference"
    events: int = 0
    total_bytes: int = 0
    peak_bytes: int = 0
    reserved_bytes: int = 0
    fragmentation: float = 1.0
    series_downsampled: List[Tuple[int, int]] = Field(default_factory=list)

    @classmethod
    def from_timeline(cls, timeline: AllocTimeline, mode: str, points: int = 512) -> "MemoryProfile":
        return cls(
            mode=mode,
            events=timeline.event_count,
            total_bytes=timeline.total_allocated_bytes,
            peak_bytes=timeline.peak_bytes,
            reserved_bytes=timeline.reserved_bytes,
            fragmentation=timeline.fragmentation,
            series_downsampled=timeline.downsample(points),
        )


class BenchReport(BaseModel):
    config: BenchConfig
    variants: List[VariantResult] = Field(default_factory=list)
    memory: Dict[str, MemoryProfile] = Field(default_factory=dict)
    speedup: Dict[str, float] = Field(default_factory=dict)
    parallel_workers: int = 0
    parallel_throughput: Optional[float] = None
    deterministic: bool = False

    def variant(self, name: str) -> VariantResult:
        for v in self.variants:
            if v.name == name:
                return v
        raise KeyError(name)

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)

    @classmethod
    def from_json(cls, text: str) -> "BenchReport":
        return cls.model_validate_json(text)


def run_latency(target: InferenceTarget, batch: int, cfg: BenchConfig) -> LatencyStats:
    data = cfg.batch(batch)
    for _ in range(cfg.warmup):
        target.infer(data)
    times = []
    for _ in range(cfg.measured):
        t0 = time.perf_counter()
        target.infer(data)
        times.append(time.perf_counter() - t0)
    return LatencyStats.from_times(batch, times)


def _speedups(variants: Sequence[VariantResult]) -> Dict[str, float]:
    """Mean throughput of each variant over the first one, on batches both completed."""
    if not variants:
        return {}
    base = {p.batch: p.throughput for p in variants[0].points if p.ok}
    out = {}
    for v in variants[1:]:
        ratios = [p.throughput / base[p.batch] for p in v.points if p.ok and base.get(p.batch)]
        if ratios:
            out[v.name] = float(np.mean(ratios))
    return out


def sweep(targets: Sequence[InferenceTarget], cfg: Optional[BenchConfig] = None) -> BenchReport:
    """One point per (batch, target); a failing point records its error and the sweep moves on."""
    cfg = cfg or BenchConfig()
    variants = []
    for target in targets:
        result = VariantResult(name=target.name, model_bytes=int(getattr(target, "model_bytes", 0)))
        for batch in cfg.batch_sizes:
            try:
                stats = run_latency(target, batch, cfg)
            except Exception as e:
                _logger.warning("%s batch %d failed: %s", target.name, batch, e)
                result.points.append(SweepPoint(batch=batch, error=f"{type(e).__name__}: {e}"))
                continue
            _logger.info(
                "%s batch %d: %.3f ms (std %.3f), %.1f img/s",
                target.name, batch, stats.mean_ms, stats.std_ms, stats.throughput,
            )
            result.points.append(SweepPoint(**stats.model_dump(exclude={"iterations"})))
        variants.append(result)
    return BenchReport(config=cfg, variants=variants, speedup=_speedups(variants))


def profile_memory(
    graph: NetworkGraph,
    batch: np.ndarray,
    training: bool = False,
    arena: Optional[TrackedArena] = None,
) -> AllocTimeline:
    """
    Allocation timeline of one pass.

    Inference frees each buffer after its last consumer. Training keeps
    activations and layer caches alive through a backward pass.
    """
    arena = arena or TrackedArena(name="training" if training else "inference")
    if training:
        # running statistics update in place
        fp = graph.copy().forward(batch, training=True, tracker=arena)
        fp.backward(np.zeros_like(fp.output))
    else:
        graph.forward(batch, tracker=arena)
    timeline = arena.timeline()
    _logger.info(
        "%s: %d events, peak %d B, %d B allocated",
        arena.name, timeline.event_count, timeline.peak_bytes, timeline.total_allocated_bytes,
    )
    return timeline


def parallel_throughput(
    graph: NetworkGraph,
    batch: np.ndarray,
    workers: int = 2,
    iterations: int = 4,
) -> Tuple[float, AllocTimeline]:
    """Images/s with ``workers`` threads each running ``iterations`` passes on a private arena."""
    sequence = SequenceCounter()
    arenas = [TrackedArena(sequence, name=f"worker{i}") for i in range(workers)]

    def run(arena: TrackedArena) -> None:
        target = GraphTarget(graph, arena.name, arena)
        for _ in range(iterations):
            target.infer(batch)

    t0 = time.perf_counter()
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for future in [pool.submit(run, a) for a in arenas]:
            future.result()
    elapsed = time.perf_counter() - t0
    images = len(batch) * iterations * workers
    return images / elapsed, merge_timelines([a.timeline() for a in arenas])


def memory_profiles(graph: NetworkGraph, frozen: NetworkGraph, cfg: BenchConfig) -> Dict[str, MemoryProfile]:
    """Training-mode timeline of ``graph`` next to the inference timeline of ``frozen``."""
    batch = cfg.batch(cfg.memory_batch)
    return {
        "training": MemoryProfile.from_timeline(profile_memory(graph, batch, training=True), "training", cfg.series_points),
        "inference": MemoryProfile.from_timeline(profile_memory(frozen, batch), "inference", cfg.series_points),
    }
