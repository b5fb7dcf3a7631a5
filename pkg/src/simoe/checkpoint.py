"""Checkpoint format: manifest.json plus one little-endian float64 blob.

The manifest lists tensors in blob order with shape, dtype and byte offset,
alongside free-form metadata (architecture, config, RNG state, ...).
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

MANIFEST = "manifest.json"
BLOB = "tensors.bin"
FORMAT_VERSION = 1


class CheckpointError(IOError):
    pass


def save(path: str | os.PathLike, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        entries = []
        offset = 0
        with open(out / BLOB, "wb") as f:
            for name, arr in tensors.items():
                arr = np.asarray(arr)
                dtype = "<i8" if np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool else "<f8"
                data = np.ascontiguousarray(arr, dtype=dtype).tobytes()
                f.write(data)
                entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype,
                                "offset": offset, "nbytes": len(data)})
                offset += len(data)
        manifest = {"format_version": FORMAT_VERSION, "blob": BLOB, "tensors": entries, **(meta or {})}
        with open(out / MANIFEST, "w") as f:
            json.dump(manifest, f, indent=1, sort_keys=True)
    except OSError as e:
        raise CheckpointError(f"failed writing checkpoint at {out}: {e}") from e
    return out


def load(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    src = Path(path)
    try:
        with open(src / MANIFEST) as f:
            manifest = json.load(f)
        blob = (src / manifest.get("blob", BLOB)).read_bytes()
    except OSError as e:
        raise CheckpointError(f"failed reading checkpoint at {src}: {e}") from e
    tensors = {}
    for e in manifest["tensors"]:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).copy()
    return tensors, manifest


def total_bytes(path: str | os.PathLike) -> int:
    p = Path(path)
    return sum(f.stat().st_size for f in p.iterdir() if f.is_file())
