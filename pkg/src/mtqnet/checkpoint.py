"""Single-file checkpoint format.

Layout::

    b"MTQC" | u32 header_len (LE) | header JSON (UTF-8) | float64 LE payloads

The header holds ``format_version``, ``model_config`` and a ``parameters``
index mapping each name to its shape and byte offset into the payload.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigurationError

MAGIC = b"MTQC"
FORMAT_VERSION = 1


def encode(state: dict[str, np.ndarray], model_config: dict, meta: dict | None = None) -> bytes:
    index = {}
    chunks = []
    offset = 0
    for name, arr in state.items():
        buf = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        index[name] = {"shape": list(np.shape(arr)), "offset": offset}
        chunks.append(buf)
        offset += len(buf)
    header = {"format_version": FORMAT_VERSION, "model_config": model_config,
              "parameters": index, "meta": meta or {}}
    hbytes = json.dumps(header).encode("utf-8")
    return MAGIC + struct.pack("<I", len(hbytes)) + hbytes + b"".join(chunks)


def decode(blob: bytes):
    if blob[:4] != MAGIC:
        raise ConfigurationError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {header.get('format_version')}")
    base = 8 + hlen
    state = {}
    for name, info in header["parameters"].items():
        shape = tuple(info["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = base + info["offset"]
        state[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=start).reshape(shape).copy()
    return header, state


def save(path, state, model_config: dict, meta: dict | None = None) -> str:
    """Write a checkpoint; returns its content hash."""
    blob = encode(state, model_config, meta)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path):
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"checkpoint not found: {path}")
    return decode(path.read_bytes())


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
