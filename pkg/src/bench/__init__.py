"""Latency sweeps, allocation timelines and bench report files."""

from src.bench.allocator import AllocEvent, AllocTimeline, TrackedArena, replay
from src.bench.factory import get_target
from src.bench.latency import BenchConfig, BenchReport, LatencyStats, profile_memory, run_latency, sweep
from src.bench.report import emit_report

__all__ = [
    "AllocEvent",
    "AllocTimeline",
    "BenchConfig",
    "BenchReport",
    "LatencyStats",
    "TrackedArena",
    "emit_report",
    "get_target",
    "profile_memory",
    "replay",
    "run_latency",
    "sweep",
]
