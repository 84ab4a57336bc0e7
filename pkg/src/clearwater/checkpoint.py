"""Checkpoint serialization: a JSON manifest plus a raw float32 sidecar.

The manifest lists every parameter with its shape and byte offset into the
sidecar, which holds little-endian float32 data concatenated in lexicographic
name order. Round trips are bit-exact. A free-form meta dict rides along in
the manifest for model hyperparameters, training progress, and config echo.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .gradcore import ParamStore

FORMAT_TAG = "clearwater-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Malformed or inconsistent checkpoint files."""


def sidecar_path(manifest_path) -> Path:
    return Path(str(manifest_path) + ".bin")


def save_checkpoint(path, store: ParamStore, meta: dict | None = None) -> None:
    """Write manifest JSON at `path` and the binary blob at `path` + ".bin".

    Both files land via a temp-file rename so an interrupted save never
    corrupts an existing checkpoint.
    """
    path = Path(path)
    entries = []
    blobs = []
    offset = 0
    for name in store.names():
        values = store.values(name)
        if values.dtype != np.float32:
            raise CheckpointError(f"{name}: checkpoints hold float32, got {values.dtype}")
        raw = np.ascontiguousarray(values, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(values.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format": FORMAT_TAG,
        "version": FORMAT_VERSION,
        "dtype": "float32",
        "byte_order": "little",
        "sidecar": sidecar_path(path).name,
        "total_bytes": offset,
        "meta": meta or {},
        "params": entries,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_bin = Path(str(path) + ".bin.tmp")
    tmp_bin.write_bytes(b"".join(blobs))
    os.replace(tmp_bin, sidecar_path(path))
    tmp_json = Path(str(path) + ".tmp")
    tmp_json.write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    os.replace(tmp_json, path)


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    """Read a manifest + sidecar pair back into a fresh ParamStore."""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable manifest {path}: {e}") from e
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT_TAG:
        raise CheckpointError(f"{path}: not a {FORMAT_TAG} manifest")
    if manifest.get("dtype") != "float32" or manifest.get("byte_order") != "little":
        raise CheckpointError(f"{path}: unsupported dtype/byte order")
    blob_path = path.parent / manifest.get("sidecar", "")
    try:
        blob = blob_path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"missing sidecar {blob_path}: {e}") from e
    declared = manifest.get("total_bytes")
    if declared is not None and declared != len(blob):
        raise CheckpointError(
            f"{blob_path}: sidecar holds {len(blob)} bytes, manifest says {declared}"
        )
    store = ParamStore()
    for entry in manifest.get("params", []):
        try:
            name, shape, offset = entry["name"], entry["shape"], entry["offset"]
        except (TypeError, KeyError) as e:
            raise CheckpointError(f"{path}: malformed param entry {entry!r}") from e
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if offset < 0 or end > len(blob):
            raise CheckpointError(f"{path}: {name} spans [{offset}, {end}) beyond sidecar")
        values = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        store.add(name, values.reshape(shape).copy())
    return store, manifest.get("meta", {})
