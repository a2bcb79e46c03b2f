"""Versioned byte-stable tensor container.

Layout: 4-byte magic, u32 format version, u64 header length, a JSON header
(sorted keys, no whitespace) indexing named tensors, then the raw tensor
bytes. Saving the result of a load reproduces the file byte for byte,
which zip-based formats cannot guarantee (they embed timestamps).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigurationError

MAGIC = b"QSEP"
FORMAT_VERSION = 1

_HEAD = struct.Struct("<4sIQ")


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Write named arrays plus a JSON-serializable metadata dict."""
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        raw = arr.tobytes()
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.name,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"meta": meta, "tensors": entries}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_HEAD.pack(MAGIC, FORMAT_VERSION, len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container; returns (tensors, meta)."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if len(data) < _HEAD.size:
        raise CheckpointError(f"checkpoint truncated: {path}")
    magic, version, header_len = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"not a checkpoint file (bad magic): {path}")
    if version > FORMAT_VERSION:
        raise ConfigurationError(
            f"checkpoint format v{version} is newer than supported v{FORMAT_VERSION}"
        )
    try:
        header = json.loads(data[_HEAD.size : _HEAD.size + header_len])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {path}") from exc
    payload = data[_HEAD.size + header_len :]
    tensors = {}
    for entry in header["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise CheckpointError(f"corrupt tensor table (out of range): {path}")
        arr = np.frombuffer(payload[start : start + nbytes], dtype=entry["dtype"])
        expected = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if arr.size != expected:
            raise CheckpointError(f"corrupt tensor {entry['name']!r}: size mismatch")
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return tensors, header["meta"]


def state_dict_to_tensors(state: dict) -> dict[str, np.ndarray]:
    """Torch state_dict -> plain numpy dict."""
    return {k: v.detach().cpu().numpy() for k, v in state.items()}


def tensors_to_state_dict(tensors: dict[str, np.ndarray]) -> dict:
    import torch

    return {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in tensors.items()}
