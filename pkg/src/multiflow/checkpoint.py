"""Single-file checkpoint format.

Layout (all integers little-endian)::

    bytes 0..7    magic  b"MFLOWCKP"
    bytes 8..11   uint32 format version (currently 1)
    bytes 12..19  uint64 manifest length L
    next L bytes  UTF-8 JSON manifest:
                    {"tensors": [{"name", "shape", "dtype": "<f8", "offset", "nbytes"}, ...],
                     "meta": {...}}
    remainder     raw little-endian float64 payloads, concatenated in manifest
                  order; ``offset`` is relative to the start of this region.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MFLOWCKP"
VERSION = 1


class CheckpointError(IOError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    offset = 0
    payloads = []
    for name, arr in arrays.items():
        buf = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "dtype": "<f8",
                        "offset": offset, "nbytes": len(buf)})
        payloads.append(buf)
        offset += len(buf)
    manifest = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(manifest)))
        fh.write(manifest)
        for buf in payloads:
            fh.write(buf)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 20 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic or truncated header)")
    version, mlen = struct.unpack_from("<IQ", raw, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    start = 20
    try:
        manifest = json.loads(raw[start:start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest") from exc
    base = start + mlen
    arrays = {}
    for entry in manifest["tensors"]:
        lo = base + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(raw):
            raise CheckpointError(f"{path}: truncated payload for {entry['name']}")
        arr = np.frombuffer(raw[lo:hi], dtype="<f8").reshape(entry["shape"]).astype(np.float64)
        arrays[entry["name"]] = arr
    return arrays, manifest.get("meta", {})
