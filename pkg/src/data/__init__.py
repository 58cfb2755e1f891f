"""Dataset ingestion and the synthetic fire-scene generator."""

from src.data.netpbm import load_image_mask, load_manifest, save_pgm, save_ppm
from src.data.samples import Sample, SynthConfig, generate_synthetic, resize_bilinear, split

__all__ = [
    "Sample",
    "SynthConfig",
    "generate_synthetic",
    "load_image_mask",
    "load_manifest",
    "resize_bilinear",
    "save_pgm",
    "save_ppm",
    "split",
]
