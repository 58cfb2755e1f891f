"""
Tensor file format.

    header   : magic b"EMBT", u32 dtype code, 4 x u32 dims   (little-endian)
    payload  : F32 -> float32, F16 -> binary16 bit patterns, I8 -> int8
    I8 only  : u32 length + QuantParams block
               (u8 granularity, u8 symmetric, u8 axis, pad, i16 qmin, i16 qmax,
                i16 zero_point, u32 n_scales, n_scales x float64)
"""
import struct
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from src.errors import CorruptFileError
from src.numerics.half import half_bits, half_bits_to_float
from src.numerics.quant import Granularity, QuantParams
from src.numerics.tensor import DType, Tensor

MAGIC = b"EMBT"
HEADER = struct.Struct("<4sI4I")
QPARAMS_HEAD = struct.Struct("<BBBxhhhI")
_GRANULARITY_CODES = {Granularity.PER_TENSOR: 0, Granularity.PER_CHANNEL: 1}


def encode_qparams(p: QuantParams) -> bytes:
    head = QPARAMS_HEAD.pack(
        _GRANULARITY_CODES[p.granularity],
        int(p.symmetric),
        p.axis,
        p.qmin,
        p.qmax,
        p.zero_point,
        p.channels,
    )
    return head + np.asarray(p.scale, dtype="<f8").tobytes()


def decode_qparams(buf: bytes) -> QuantParams:
    if len(buf) < QPARAMS_HEAD.size:
        raise CorruptFileError("truncated QuantParams block")
    gran, sym, axis, qmin, qmax, zp, n = QPARAMS_HEAD.unpack_from(buf, 0)
    if len(buf) != QPARAMS_HEAD.size + 8 * n:
        raise CorruptFileError("QuantParams block length disagrees with its scale count")
    scales = np.frombuffer(buf, dtype="<f8", count=n, offset=QPARAMS_HEAD.size)
    granularity = Granularity.PER_CHANNEL if gran == 1 else Granularity.PER_TENSOR
    try:
        return QuantParams(
            scale=tuple(scales.tolist()),
            zero_point=zp,
            qmin=qmin,
            qmax=qmax,
            granularity=granularity,
            symmetric=bool(sym),
            axis=axis,
        )
    except ValueError as exc:
        raise CorruptFileError(f"invalid QuantParams: {exc}") from exc


def encode_tensor(t: Tensor) -> bytes:
    header = HEADER.pack(MAGIC, t.dtype.code, *t.shape)
    if t.dtype is DType.F32:
        payload = t.data.astype("<f4").tobytes()
    elif t.dtype is DType.F16:
        payload = half_bits(t.data).astype("<u2").tobytes()
    else:
        block = encode_qparams(t.qparams)
        payload = t.data.tobytes() + struct.pack("<I", len(block)) + block
    return header + payload


def decode_tensor(buf: bytes, offset: int = 0) -> Tuple[Tensor, int]:
    """
    Decode one tensor starting at ``offset``.

    Returns:
        The tensor and the offset just past it.
    """
    if len(buf) - offset < HEADER.size:
        raise CorruptFileError("truncated tensor header")
    magic, code, *dims = HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise CorruptFileError(f"bad tensor magic {magic!r}")
    try:
        dtype = DType.from_code(code)
    except ValueError as exc:
        raise CorruptFileError(str(exc)) from exc

    pos = offset + HEADER.size
    count = int(np.prod(dims))
    size = count * dtype.itemsize
    if len(buf) - pos < size:
        raise CorruptFileError("truncated tensor payload")

    if dtype is DType.F32:
        data = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).astype(np.float32)
        tensor = Tensor(data.reshape(dims), DType.F32)
    elif dtype is DType.F16:
        bits = np.frombuffer(buf, dtype="<u2", count=count, offset=pos)
        tensor = Tensor(half_bits_to_float(bits).reshape(dims), DType.F16)
    else:
        data = np.frombuffer(buf, dtype=np.int8, count=count, offset=pos).copy()
        qpos = pos + size
        if len(buf) - qpos < 4:
            raise CorruptFileError("missing QuantParams length")
        (block_len,) = struct.unpack_from("<I", buf, qpos)
        block = buf[qpos + 4: qpos + 4 + block_len]
        if len(block) != block_len:
            raise CorruptFileError("truncated QuantParams block")
        tensor = Tensor(data.reshape(dims), DType.I8, decode_qparams(block))
        return tensor, qpos + 4 + block_len
    return tensor, pos + size


def save_tensor(t: Tensor, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensor(t))
    return path


def load_tensor(path: Union[str, Path]) -> Tensor:
    buf = Path(path).read_bytes()
    tensor, end = decode_tensor(buf)
    if end != len(buf):
        raise CorruptFileError(f"{len(buf) - end} trailing bytes after tensor")
    return tensor
