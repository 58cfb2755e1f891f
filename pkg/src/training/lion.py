"""
Lion optimizer (sign of an interpolated momentum, decoupled weight decay).

    c = b1 * m + (1 - b1) * g
    w <- w - lr * (sign(c) + wd * w)
    m <- b2 * m + (1 - b2) * g
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional, Union

import numpy as np

from src.errors import NonFiniteGradientError


@dataclass
class LionState:
    momentum: Dict[str, np.ndarray] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.01
    lr: float = 3e-4
    step: int = 0

    def __post_init__(self):
        for name, beta in (("beta1", self.beta1), ("beta2", self.beta2)):
            if not 0.0 < beta < 1.0:
                raise ValueError(f"{name} must be in (0, 1), got {beta}")

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray], **kwargs) -> "LionState":
        return cls({k: np.zeros_like(v, dtype=np.float32) for k, v in params.items()}, **kwargs)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        hyper = np.array([self.beta1, self.beta2, self.weight_decay, self.lr, self.step], dtype=np.float64)
        with path.open("wb") as fh:
            np.savez(fh, __hyper__=hyper, **{f"m:{k}": v for k, v in self.momentum.items()})
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "LionState":
        with np.load(Path(path)) as data:
            beta1, beta2, wd, lr, step = data["__hyper__"].tolist()
            momentum = {k[2:]: data[k].astype(np.float32) for k in data.files if k.startswith("m:")}
        return cls(momentum, beta1, beta2, wd, lr, int(step))


def lion_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: LionState,
    lr: Optional[float] = None,
) -> None:
    """
    Update ``params`` and ``state.momentum`` in place.

    Raises:
        NonFiniteGradientError: a gradient holds inf or NaN (nothing is modified).
    """
    lr = state.lr if lr is None else lr
    for key, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteGradientError(f"gradient of '{key}' is not finite")
    b1, b2, wd = state.beta1, state.beta2, state.weight_decay
    for key, g in grads.items():
        w = params[key]
        m = state.momentum.setdefault(key, np.zeros_like(w, dtype=np.float32))
        if m.shape != w.shape or g.shape != w.shape:
            raise ValueError(f"'{key}': parameter {w.shape}, gradient {g.shape}, momentum {m.shape}")
        c = b1 * m + (1.0 - b1) * g
        w -= (lr * (np.sign(c) + wd * w)).astype(w.dtype)
        m *= b2
        m += (1.0 - b2) * g
    state.step += 1
