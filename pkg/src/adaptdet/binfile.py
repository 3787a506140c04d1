"""Deterministic binary container: JSON header + raw float64 blobs.

Used for checkpoints and dataset files. The byte stream is a pure function
of the content (sorted-key JSON, little-endian float64 payload), so
save -> load -> save round-trips to identical bytes.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from typing import Any

import numpy as np

MAGIC = b"ADPTBIN1"


def container_bytes(header: dict[str, Any], arrays: dict[str, np.ndarray]) -> bytes:
    order = sorted(arrays)
    meta = {
        "header": header,
        "arrays": [{"name": n, "shape": list(arrays[n].shape)} for n in order],
    }
    head = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, struct.pack("<Q", len(head)), head]
    chunks.extend(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes() for n in order)
    return b"".join(chunks)


def write_container(path: str, header: dict[str, Any], arrays: dict[str, np.ndarray]) -> None:
    """Write header + named float64 arrays. Atomic (temp file + rename)."""
    payload = container_bytes(header, arrays)
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_container(path: str) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a container file (bad magic {magic!r})")
        (head_len,) = struct.unpack("<Q", f.read(8))
        meta = json.loads(f.read(head_len).decode("utf-8"))
        arrays: dict[str, np.ndarray] = {}
        for entry in meta["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * count)
            if len(buf) != 8 * count:
                raise ValueError(f"{path}: truncated payload for array {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
    return meta["header"], arrays
