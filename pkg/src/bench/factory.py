from typing import Optional

from src.errors import ConfigError
from src.network.graph import AllocationTracker, NetworkGraph

from .base import GraphTarget, InferenceTarget, StubTarget


def get_target(
    kind: str = "graph",
    graph: Optional[NetworkGraph] = None,
    name: Optional[str] = None,
    tracker: Optional[AllocationTracker] = None,
    per_image_s: float = 0.0,
    per_batch_s: float = 0.0,
) -> InferenceTarget:
    """Factory method to obtain a benchmark target.

    Supported kinds: graph (default, needs ``graph``), stub (constant sleep).
    """
    kind = kind.lower()
    if kind == "stub":
        return StubTarget(name or "stub", per_image_s=per_image_s, per_batch_s=per_batch_s)
    if kind == "graph":
        if graph is None:
            raise ConfigError("graph target requires a model")
        return GraphTarget(graph, name or _variant_name(graph), tracker)
    raise ConfigError(f"unknown bench target '{kind}' (expected graph or stub)")


def _variant_name(graph: NetworkGraph) -> str:
    tags = {p.value for p in graph.precisions.values()}
    if not tags:
        return "fp32"
    return "+".join(sorted(tags))
