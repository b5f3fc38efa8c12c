"""Checkpoint container: JSON header plus raw little-endian float blobs.

Layout: 8-byte magic ``MSYOCKPT``, uint64-LE header length, UTF-8 JSON
header, then the concatenated tensor blobs. The header echoes the model
config and carries a tensor manifest (name, shape, dtype, byte offset into
the blob region). Round-trips are byte-exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .config import ModelConfig
from .errors import ParseError
from .model import ModelGraph, build_msyolo

MAGIC = b"MSYOCKPT"
FORMAT_VERSION = 1

_DTYPES = {"<f4": "<f4", "<f8": "<f8"}


def _all_tensors(graph: ModelGraph):
    for name, p in graph.named_parameters():
        yield name, p.data
    for name, b in graph.named_buffers():
        yield name, b


def checkpoint_bytes(graph: ModelGraph) -> bytes:
    manifest = []
    blobs = []
    offset = 0
    for name, arr in _all_tensors(graph):
        data = np.ascontiguousarray(arr, dtype="<f4" if arr.dtype != np.float64 else "<f8")
        raw = data.tobytes()
        manifest.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": data.dtype.str,
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "config": graph.config.to_dict(),
        "tensors": manifest,
    }
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hjson)) + hjson + b"".join(blobs)


def save_checkpoint(graph: ModelGraph, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(graph))


def load_checkpoint_bytes(blob: bytes) -> ModelGraph:
    if blob[:8] != MAGIC:
        raise ParseError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"corrupt checkpoint header: {exc}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise ParseError(f"unsupported checkpoint version {header.get('format_version')}")
    config = ModelConfig.from_dict(header["config"])
    graph = build_msyolo(config, seed=0)
    data_start = 16 + hlen
    tensors = dict(_all_tensors(graph))
    seen = set()
    for entry in header["tensors"]:
        name = entry["name"]
        if name not in tensors:
            raise ParseError(f"checkpoint tensor {name!r} not present in rebuilt graph")
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise ParseError(f"checkpoint tensor {name!r} has unsupported dtype {entry['dtype']}")
        start = data_start + entry["offset"]
        arr = np.frombuffer(blob[start:start + entry["nbytes"]], dtype=dtype)
        arr = arr.reshape(entry["shape"])
        target = tensors[name]
        if tuple(target.shape) != tuple(arr.shape):
            raise ParseError(f"checkpoint tensor {name!r} shape {arr.shape} != graph {target.shape}")
        target[...] = arr
        seen.add(name)
    missing = set(tensors) - seen
    if missing:
        raise ParseError(f"checkpoint is missing tensors: {sorted(missing)[:5]} ...")
    return graph


def load_checkpoint(path: str) -> ModelGraph:
    with open(path, "rb") as fh:
        return load_checkpoint_bytes(fh.read())
