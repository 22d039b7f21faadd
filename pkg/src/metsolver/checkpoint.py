"""METCKPT1 checkpoint files.

Layout: 8-byte magic "METCKPT1", little-endian int32 format version, int32
entry count, then per entry a length-prefixed UTF-8 name, int32 ndim,
int64 dims, and the int64 byte offset of its data inside the data section.
The data section is the concatenated raw little-endian float64 arrays.
A sidecar JSON record `<path>.json` carries model kind, config, training
step, seed, and any extra metadata.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"METCKPT1"
FORMAT_VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray], metadata: dict):
    """Write arrays plus a sidecar metadata record; returns the data hash."""
    path = Path(path)
    names = list(arrays)
    header = bytearray()
    header += MAGIC
    header += struct.pack("<ii", FORMAT_VERSION, len(names))
    offset = 0
    blobs = []
    for name in names:
        arr = np.asarray(arrays[name], dtype="<f8")
        raw = arr.tobytes()  # C-order copy regardless of input layout
        nb = name.encode("utf-8")
        header += struct.pack("<i", len(nb)) + nb
        header += struct.pack("<i", arr.ndim)
        header += struct.pack(f"<{arr.ndim}q", *arr.shape)
        header += struct.pack("<q", offset)
        offset += len(raw)
        blobs.append(raw)
    payload = bytes(header) + b"".join(blobs)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload)
    digest = hashlib.sha256(payload).hexdigest()
    sidecar = dict(metadata)
    sidecar.setdefault("format", "METCKPT1")
    sidecar["sha256"] = digest
    Path(str(path) + ".json").write_text(
        json.dumps(sidecar, indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )
    return digest


def load_checkpoint(path):
    """Read arrays and sidecar metadata back; returns (arrays, metadata)."""
    path = Path(path)
    payload = path.read_bytes()
    if payload[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {payload[:8]!r}")
    version, count = struct.unpack_from("<ii", payload, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos = 16
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<i", payload, pos)
        pos += 4
        name = payload[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<i", payload, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}q", payload, pos)
        pos += 8 * ndim
        (offset,) = struct.unpack_from("<q", payload, pos)
        pos += 8
        entries.append((name, shape, offset))
    data_start = pos
    arrays = {}
    for name, shape, offset in entries:
        n = int(np.prod(shape)) if shape else 1
        start = data_start + offset
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=start)
        arrays[name] = arr.reshape(shape).astype(np.float64)

    sidecar_path = Path(str(path) + ".json")
    metadata = {}
    if sidecar_path.exists():
        metadata = json.loads(sidecar_path.read_text(encoding="utf-8"))
    return arrays, metadata


def manifest_element_total(path) -> int:
    """Total number of stored scalars, straight from the manifest entries."""
    arrays, _ = load_checkpoint(path)
    return sum(a.size for a in arrays.values())
