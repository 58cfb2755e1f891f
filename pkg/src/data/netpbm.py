"""
Netpbm ingestion: 8-bit PPM (P6) images, PGM (P5) masks and tab-separated manifests.
"""
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from src.data.samples import Sample, resize_bilinear
from src.errors import DimensionMismatchError, MalformedHeaderError, MaskValueError
from src.log_helper import get_logger

_logger = get_logger(__name__)

PathLike = Union[str, Path]
MASK_THRESHOLD = 128


def _header_tokens(buf: bytes, count: int) -> Tuple[List[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise MalformedHeaderError("header ends early")
        if buf[pos:pos + 1] == b"#":
            end = buf.find(b"\n", pos)
            pos = len(buf) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise MalformedHeaderError("missing whitespace after header")
    return tokens, pos + 1


def read_netpbm(buf: bytes, expected_magic: bytes) -> np.ndarray:
    """
    Decode a binary 8-bit PPM/PGM.

    Returns:
        uint8 array, (H, W, 3) for P6 and (H, W) for P5.

    Raises:
        MalformedHeaderError: wrong magic, bad numbers, maxval above 255 or short payload.
    """
    tokens, offset = _header_tokens(buf, 4)
    magic, *numbers = tokens
    if magic != expected_magic:
        raise MalformedHeaderError(f"expected {expected_magic!r}, got {magic!r}")
    try:
        width, height, maxval = (int(t) for t in numbers)
    except ValueError as exc:
        raise MalformedHeaderError(f"non-numeric header field: {exc}") from exc
    if width < 1 or height < 1 or not 0 < maxval <= 255:
        raise MalformedHeaderError(f"unsupported geometry {width}x{height} maxval {maxval}")
    channels = 3 if magic == b"P6" else 1
    size = width * height * channels
    payload = buf[offset: offset + size]
    if len(payload) != size:
        raise MalformedHeaderError(f"payload has {len(payload)} bytes, expected {size}")
    pixels = np.frombuffer(payload, dtype=np.uint8)
    if maxval != 255:
        pixels = np.round(pixels.astype(np.float64) * 255.0 / maxval).astype(np.uint8)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return pixels.reshape(shape)


def binarize_mask(raw: np.ndarray, strict: bool = False, name: str = "") -> np.ndarray:
    """Threshold at 128. Values other than 0/255 raise in strict mode and log a warning otherwise."""
    unexpected = (raw != 0) & (raw != 255)
    if unexpected.any():
        message = f"mask {name} has {int(unexpected.sum())} pixels outside {{0, 255}}"
        if strict:
            raise MaskValueError(message)
        _logger.warning("%s; binarizing at %d", message, MASK_THRESHOLD)
    return (raw >= MASK_THRESHOLD).astype(np.uint8)


def load_image_mask(image_path: PathLike, mask_path: PathLike, strict: bool = False) -> Sample:
    """
    Load a P6 image and a P5 mask as one Sample.

    Raises:
        MalformedHeaderError: either file is not a valid 8-bit Netpbm of its kind.
        DimensionMismatchError: image and mask sizes differ.
    """
    image_path, mask_path = Path(image_path), Path(mask_path)
    rgb = read_netpbm(image_path.read_bytes(), b"P6")
    raw = read_netpbm(mask_path.read_bytes(), b"P5")
    if raw.shape != rgb.shape[:2]:
        raise DimensionMismatchError(f"image {rgb.shape[:2]} and mask {raw.shape} differ ({image_path.name})")
    image = np.transpose(rgb, (2, 0, 1)).astype(np.float32) / 255.0
    return Sample(image, binarize_mask(raw, strict, mask_path.name), image_path.stem)


def _write(path: PathLike, magic: bytes, pixels: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    height, width = pixels.shape[:2]
    path.write_bytes(magic + b"\n%d %d\n255\n" % (width, height) + np.ascontiguousarray(pixels).tobytes())
    return path


def save_ppm(path: PathLike, image: np.ndarray) -> Path:
    """Write a 3 x H x W image in [0, 1] as P6."""
    rgb = np.clip(np.rint(np.transpose(image, (1, 2, 0)) * 255.0), 0, 255).astype(np.uint8)
    return _write(path, b"P6", rgb)


def save_pgm(path: PathLike, mask: np.ndarray) -> Path:
    """Write a binary mask as P5 with 0/255."""
    return _write(path, b"P5", (np.asarray(mask) > 0).astype(np.uint8) * 255)


def save_sample(sample: Sample, directory: PathLike) -> Tuple[Path, Path]:
    directory = Path(directory)
    return (
        save_ppm(directory / f"{sample.id}.ppm", sample.image),
        save_pgm(directory / f"{sample.id}_mask.pgm", sample.mask),
    )


def read_manifest(path: PathLike) -> List[Tuple[Path, Path]]:
    """``image<TAB>mask`` lines; relative paths resolve against the manifest's directory."""
    path = Path(path)
    pairs = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise MalformedHeaderError(f"{path}:{lineno}: expected 'image<TAB>mask'")
        pairs.append(tuple(path.parent / p.strip() for p in parts))
    return pairs


def write_manifest(path: PathLike, pairs: List[Tuple[Path, Path]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for image, mask in pairs:
        lines.append(f"{Path(image).relative_to(path.parent)}\t{Path(mask).relative_to(path.parent)}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_manifest(
    path: PathLike, size: Optional[Tuple[int, int]] = None, strict: bool = False
) -> List[Sample]:
    samples = []
    for image, mask in read_manifest(path):
        sample = load_image_mask(image, mask, strict)
        samples.append(sample if size is None else resize_bilinear(sample, *size))
    _logger.info("loaded %d samples from %s", len(samples), path)
    return samples
