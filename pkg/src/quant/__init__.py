"""Calibration, fake quantization and post-training selective-precision conversion."""
