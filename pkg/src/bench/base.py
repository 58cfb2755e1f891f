import time
from dataclasses import dataclass
from typing import Optional, Protocol

import numpy as np

from src.network.graph import AllocationTracker, NetworkGraph


class InferenceTarget(Protocol):
    """Anything the latency harness can time."""

    name: str

    def infer(self, batch: np.ndarray) -> np.ndarray:
        """
        Run one inference on an (N, C, H, W) batch.
        Must return only after the result is fully computed.
        """
        ...


@dataclass
class GraphTarget:
    graph: NetworkGraph
    name: str = "fp32"
    tracker: Optional[AllocationTracker] = None

    def infer(self, batch: np.ndarray) -> np.ndarray:
        return self.graph.forward(batch, tracker=self.tracker).output

    @property
    def model_bytes(self) -> int:
        return self.graph.param_bytes()


@dataclass
class StubTarget:
    """Constant-cost stand-in: sleeps ``per_batch_s + batch * per_image_s`` per call."""

    name: str = "stub"
    per_image_s: float = 0.0
    per_batch_s: float = 0.0
    model_bytes: int = 0

    def cost(self, batch_size: int) -> float:
        return self.per_batch_s + batch_size * self.per_image_s

    def infer(self, batch: np.ndarray) -> np.ndarray:
        delay = self.cost(len(batch))
        if delay > 0:
            time.sleep(delay)
        return batch
