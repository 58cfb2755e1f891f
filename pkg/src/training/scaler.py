"""
Loss scaling for mixed-precision training.

Static mode keeps one scale (default 128) and skips steps with non-finite
gradients. Dynamic mode additionally halves the scale on overflow and
doubles it after ``growth_interval`` consecutive clean steps, up to 2**24.
"""
import json
import math
from pathlib import Path
from typing import Dict, Literal, Mapping, Optional, Union

import numpy as np

MAX_SCALE = 2.0 ** 24


def _is_power_of_two(value: float) -> bool:
    if value <= 0 or not math.isfinite(value):
        return False
    mantissa, _ = math.frexp(value)
    return mantissa == 0.5


class LossScaler:
    def __init__(
        self,
        mode: Literal["static", "dynamic"] = "static",
        init_scale: float = 128.0,
        growth_interval: int = 200,
        growth_factor: float = 2.0,
        backoff_factor: float = 0.5,
        max_scale: float = MAX_SCALE,
    ):
        if mode not in ("static", "dynamic"):
            raise ValueError(f"loss scaler mode must be 'static' or 'dynamic', got '{mode}'")
        if not _is_power_of_two(init_scale) or init_scale > max_scale:
            raise ValueError(f"loss scale must be a power of two <= {max_scale}, got {init_scale}")
        self.mode = mode
        self.scale = float(init_scale)
        self.last_scale = self.scale
        self.growth_interval = growth_interval
        self.growth_factor = growth_factor
        self.backoff_factor = backoff_factor
        self.max_scale = max_scale
        self.good_steps = 0
        self.skipped = 0

    @property
    def dynamic(self) -> bool:
        return self.mode == "dynamic"

    def unscale(self, grads: Mapping[str, np.ndarray]) -> Optional[Dict[str, np.ndarray]]:
        """
        Divide gradients by the scale and update the scaler.

        Returns:
            Unscaled gradients, or None when any gradient is non-finite (skip the step).
        """
        found_inf = any(not np.isfinite(g).all() for g in grads.values())
        self.update(found_inf)
        if found_inf:
            return None
        inv = np.float32(1.0 / self.last_scale)
        return {k: (g * inv).astype(np.float32, copy=False) for k, g in grads.items()}

    def update(self, found_inf: bool) -> None:
        self.last_scale = self.scale
        if found_inf:
            self.skipped += 1
            self.good_steps = 0
            if self.dynamic:
                self.scale = max(self.scale * self.backoff_factor, 1.0)
            return
        self.good_steps += 1
        if self.dynamic and self.good_steps >= self.growth_interval:
            self.scale = min(self.scale * self.growth_factor, self.max_scale)
            self.good_steps = 0

    def state_dict(self) -> Dict[str, Union[str, float, int]]:
        return {
            "mode": self.mode,
            "scale": self.scale,
            "growth_interval": self.growth_interval,
            "growth_factor": self.growth_factor,
            "backoff_factor": self.backoff_factor,
            "max_scale": self.max_scale,
            "good_steps": self.good_steps,
            "skipped": self.skipped,
        }

    @classmethod
    def from_state_dict(cls, state: Mapping) -> "LossScaler":
        scaler = cls(
            state["mode"],
            state["scale"],
            state["growth_interval"],
            state["growth_factor"],
            state["backoff_factor"],
            state["max_scale"],
        )
        scaler.good_steps = int(state["good_steps"])
        scaler.skipped = int(state["skipped"])
        return scaler

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.state_dict(), indent=2), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "LossScaler":
        return cls.from_state_dict(json.loads(Path(path).read_text(encoding="utf-8")))
