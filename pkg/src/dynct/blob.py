"""Tensor checkpoints: one little-endian binary blob plus a JSON manifest."""

import json
from pathlib import Path

import numpy as np

from .errors import VolumeFormatError

_DTYPES = {"f32": "<f4", "f64": "<f8"}


def save_tensors(directory, name, tensors, **extra):
    """Write ``tensors`` (name -> array) to ``<name>.bin`` / ``<name>.json`` in ``directory``.

    Float32 arrays are stored as ``f32``, anything wider as ``f64``.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for key, arr in tensors.items():
        arr = np.asarray(arr)
        tag = "f32" if arr.dtype == np.float32 else "f64"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        entries.append({"name": key, "shape": list(arr.shape), "dtype": tag,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    (directory / f"{name}.bin").write_bytes(b"".join(chunks))
    manifest = dict(extra, tensors=entries)
    (directory / f"{name}.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_tensors(directory, name):
    """Inverse of :func:`save_tensors`; returns ``(tensors, manifest)``."""
    directory = Path(directory)
    try:
        manifest = json.loads((directory / f"{name}.json").read_text())
        blob = (directory / f"{name}.bin").read_bytes()
    except FileNotFoundError as exc:
        raise VolumeFormatError(f"incomplete checkpoint in {directory}: {exc}") from exc
    tensors = {}
    for e in manifest["tensors"]:
        dt = np.dtype(_DTYPES[e["dtype"]])
        end = e["offset"] + e["nbytes"]
        if end > len(blob) or e["nbytes"] != dt.itemsize * int(np.prod(e["shape"])):
            raise VolumeFormatError(f"tensor {e['name']!r} does not fit the blob")
        arr = np.frombuffer(blob[e["offset"]:end], dtype=dt).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(dt.newbyteorder("="))
    return tensors, manifest
