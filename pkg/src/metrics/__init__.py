"""Segmentation metrics."""

from src.metrics.confusion import ConfusionMatrix, MpaResult, argmax_mask, fps, ms_per_image

__all__ = ["ConfusionMatrix", "MpaResult", "argmax_mask", "fps", "ms_per_image"]
