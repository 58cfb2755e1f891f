"""
Tracked bump arena and the allocation timeline it records.

Every buffer acquisition bumps the arena pointer; the pointer rewinds only
when no buffer is live (the end of a forward pass). "Active Memory" is the
sum of live buffer sizes, "Active Cache" the arena bytes reserved so far and
"Allocator State" the live-buffer map. Events carry a sequence number drawn
from a counter that several arenas may share, so per-worker timelines merge
into one global order.
"""
import itertools
import threading
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

from src.errors import DoubleFreeError

ALLOC = "alloc"
FREE = "free"
ALIGNMENT = 64


@dataclass(frozen=True)
class AllocEvent:
    seq: int
    kind: str
    nbytes: int
    tag: str
    handle: int


class SequenceCounter:
    """Thread-safe monotonically increasing counter."""

    def __init__(self, start: int = 0):
        self._counter: Iterator[int] = itertools.count(start)
        self._lock = threading.Lock()

    def next(self) -> int:
        with self._lock:
            return next(self._counter)


def _aligned(nbytes: int) -> int:
    return (nbytes + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT


class TrackedArena:
    """Allocation tracker for the graph executor (``on_alloc`` / ``on_free``)."""

    def __init__(self, sequence: Optional[SequenceCounter] = None, name: str = "arena"):
        self.name = name
        self.sequence = sequence or SequenceCounter()
        self.events: List[AllocEvent] = []
        self.live: Dict[int, Tuple[int, str]] = {}
        self.offset = 0
        self.reserved = 0
        self._lock = threading.Lock()

    def on_alloc(self, nbytes: int, tag: str) -> int:
        with self._lock:
            seq = self.sequence.next()
            self.live[seq] = (int(nbytes), tag)
            self.offset += _aligned(int(nbytes))
            self.reserved = max(self.reserved, self.offset)
            self.events.append(AllocEvent(seq, ALLOC, int(nbytes), tag, seq))
            return seq

    def on_free(self, handle: int) -> None:
        """
        Raises:
            DoubleFreeError: ``handle`` is not live.
        """
        with self._lock:
            if handle not in self.live:
                raise DoubleFreeError(f"handle {handle} freed twice or never allocated")
            nbytes, tag = self.live.pop(handle)
            self.events.append(AllocEvent(self.sequence.next(), FREE, nbytes, tag, handle))
            if not self.live:
                self.offset = 0

    def snapshot(self) -> Dict[int, Tuple[int, str]]:
        """Allocator State: live handles with their sizes and tags."""
        with self._lock:
            return dict(self.live)

    def timeline(self) -> "AllocTimeline":
        with self._lock:
            return AllocTimeline(list(self.events), self.reserved)


def replay(events: Iterable[AllocEvent]) -> List[int]:
    """Active bytes after each event, recomputed from the event list alone."""
    live: Dict[int, int] = {}
    series = []
    active = 0
    for event in events:
        if event.kind == ALLOC:
            live[event.handle] = event.nbytes
            active += event.nbytes
        else:
            if event.handle not in live:
                raise DoubleFreeError(f"event {event.seq} frees unknown handle {event.handle}")
            active -= live.pop(event.handle)
        series.append(active)
    return series


@dataclass
class AllocTimeline:
    events: List[AllocEvent] = field(default_factory=list)
    reserved_bytes: int = 0

    @property
    def active_series(self) -> List[int]:
        return replay(self.events)

    @property
    def peak_bytes(self) -> int:
        return max(self.active_series, default=0)

    @property
    def event_count(self) -> int:
        return len(self.events)

    @property
    def total_allocated_bytes(self) -> int:
        return sum(e.nbytes for e in self.events if e.kind == ALLOC)

    @property
    def fragmentation(self) -> float:
        """Reserved arena high-water over peak live bytes (1.0 for an empty run)."""
        peak = self.peak_bytes
        return self.reserved_bytes / peak if peak else 1.0

    def downsample(self, points: int = 512) -> List[Tuple[int, int]]:
        """(seq, active bytes) pairs, at most ``points`` of them, always keeping the peak."""
        series = self.active_series
        if not series:
            return []
        seqs = [e.seq for e in self.events]
        if len(series) <= points:
            return list(zip(seqs, series))
        stride = len(series) / points
        picks = {int(i * stride) for i in range(points)}
        picks.add(series.index(max(series)))
        picks.add(len(series) - 1)
        return [(seqs[i], series[i]) for i in sorted(picks)]


def merge_timelines(timelines: Sequence[AllocTimeline]) -> AllocTimeline:
    """Interleave timelines that share one sequence counter."""
    events = sorted((e for t in timelines for e in t.events), key=lambda e: e.seq)
    return AllocTimeline(events, sum(t.reserved_bytes for t in timelines))
