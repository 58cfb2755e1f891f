import math


def warmup_steps(total_steps: int, warmup_fraction: float = 0.05) -> int:
    return max(1, int(math.ceil(total_steps * warmup_fraction))) if warmup_fraction > 0 else 0


def cosine_lr(
    step: int,
    total_steps: int,
    base_lr: float = 3e-4,
    warmup_fraction: float = 0.05,
    min_lr: float = 0.0,
) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to ``min_lr`` at ``total_steps``."""
    warmup = warmup_steps(total_steps, warmup_fraction)
    if step < warmup:
        return base_lr * (step + 1) / warmup
    span = max(1, total_steps - warmup)
    progress = min(1.0, (step - warmup) / span)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))
