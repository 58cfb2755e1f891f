"""
Model file format.

    magic b"EMBM", u32 format version, u32 header length, header JSON
    u32 parameter count, then per parameter: u16 name length, utf-8 name, tensor blob

The header JSON carries the ModelConfig, the node table, taps, per-node
precision tags and activation QuantParams of quantized graphs. Parameter
blobs use the tensor file encoding, so F16 and I8 weights keep their size.
"""
import json
import struct
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, Union

from pydantic import ValidationError

from src.errors import CorruptFileError, VersionMismatchError
from src.log_helper import get_logger
from src.network.builder import ModelConfig
from src.network.graph import NetworkGraph
from src.network.layers import Node
from src.numerics.io import decode_tensor, encode_tensor
from src.numerics.quant import Granularity, QuantParams

_logger = get_logger(__name__)

MAGIC = b"EMBM"
FORMAT_VERSION = 1
_U32 = struct.Struct("<I")
_U16 = struct.Struct("<H")


def qparams_to_dict(p: QuantParams) -> Dict[str, Any]:
    data = asdict(p)
    data["scale"] = list(p.scale)
    data["granularity"] = p.granularity.value
    return data


def qparams_from_dict(data: Dict[str, Any]) -> QuantParams:
    payload = dict(data)
    payload["scale"] = tuple(payload["scale"])
    payload["granularity"] = Granularity(payload["granularity"])
    return QuantParams(**payload)


def encode_model(graph: NetworkGraph) -> bytes:
    header = {
        "config": graph.config.model_dump(mode="json") if graph.config is not None else None,
        "input_shape": list(graph.input_shape),
        "output": graph.output,
        "frozen": graph.frozen,
        "nodes": [node.to_dict() for node in graph.nodes],
        "taps": graph.taps,
        "precisions": {name: p.value for name, p in graph.precisions.items()},
        "act_qparams": {name: qparams_to_dict(p) for name, p in graph.act_qparams.items()},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, _U32.pack(FORMAT_VERSION), _U32.pack(len(header_bytes)), header_bytes]
    parts.append(_U32.pack(len(graph.params)))
    for key in sorted(graph.params):
        name = key.encode("utf-8")
        parts += [_U16.pack(len(name)), name, encode_tensor(graph.params[key])]
    return b"".join(parts)


def decode_model(buf: bytes) -> NetworkGraph:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise CorruptFileError("not a model file (bad magic)")
    (version,) = _U32.unpack_from(buf, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"model format version {version}, expected {FORMAT_VERSION}")
    (header_len,) = _U32.unpack_from(buf, 8)
    pos = 12 + header_len
    if len(buf) < pos + 4:
        raise CorruptFileError("truncated model header")
    try:
        header = json.loads(buf[12:pos].decode("utf-8"))
        config = ModelConfig.model_validate(header["config"]) if header["config"] is not None else None
        nodes = [Node.from_dict(item) for item in header["nodes"]]
        act_qparams = {name: qparams_from_dict(d) for name, d in header["act_qparams"].items()}
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError, ValidationError) as exc:
        raise CorruptFileError(f"unreadable model header: {exc}") from exc

    (count,) = _U32.unpack_from(buf, pos)
    pos += 4
    params = {}
    for _ in range(count):
        if len(buf) < pos + 2:
            raise CorruptFileError("truncated parameter table")
        (name_len,) = _U16.unpack_from(buf, pos)
        name = buf[pos + 2: pos + 2 + name_len].decode("utf-8", errors="replace")
        params[name], pos = decode_tensor(buf, pos + 2 + name_len)
    if pos != len(buf):
        raise CorruptFileError(f"{len(buf) - pos} trailing bytes after parameters")

    graph = NetworkGraph(
        nodes,
        tuple(header["input_shape"]),
        header["output"],
        header["taps"],
        params,
        header["precisions"],
        act_qparams,
        config,
        header.get("frozen", False),
    )
    try:
        graph.validate()
    except ValueError as exc:
        raise CorruptFileError(f"model graph is invalid: {exc}") from exc
    return graph


def save_model(graph: NetworkGraph, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_model(graph)
    path.write_bytes(data)
    _logger.debug("saved model %s (%d bytes, %d parameters)", path, len(data), len(graph.params))
    return path


def load_model(path: Union[str, Path]) -> NetworkGraph:
    return decode_model(Path(path).read_bytes())
