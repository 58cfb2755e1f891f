"""Pixelwise two-class cross-entropy."""
from typing import Tuple

import numpy as np

from src.errors import LabelOutOfRangeError, ShapeMismatchError


def cross_entropy_loss(logits: np.ndarray, mask: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Mean over pixels of -log softmax(logits)[target].

    Args:
        logits: n x K x H x W.
        mask: n x H x W (or n x 1 x H x W) integer labels in [0, K).

    Returns:
        The loss and its gradient with respect to ``logits``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask)
    if mask.ndim == 4 and mask.shape[1] == 1:
        mask = mask[:, 0]
    n, k, h, w = logits.shape
    if mask.shape != (n, h, w):
        raise ShapeMismatchError(f"mask {mask.shape} does not match logits {logits.shape}")
    if mask.size and (mask.min() < 0 or mask.max() >= k):
        raise LabelOutOfRangeError(f"mask labels must lie in [0, {k})")

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    onehot = np.zeros_like(log_probs)
    np.put_along_axis(onehot, mask[:, np.newaxis].astype(np.int64), 1.0, axis=1)
    pixels = n * h * w
    loss = float(-(log_probs * onehot).sum() / pixels)
    grad = (np.exp(log_probs) - onehot) / pixels
    return loss, grad.astype(np.float32)
