"""Single-file checkpoint archive (see docs/checkpoint.md).

A ZIP container (stored, uncompressed) holding ``manifest.json`` and one
``tensors/<name>.f32`` blob per tensor: raw little-endian float32, C order.
"""
from __future__ import annotations

import hashlib
import json
import os
import zipfile
from pathlib import Path

import numpy as np

from .errors import CheckpointError, CheckpointVersionError

FORMAT = "vlur-checkpoint"
VERSION = 1
_LE_F32 = np.dtype("<f4")


def content_hash(tensors: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=_LE_F32)
        h.update(name.encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> Path:
    """Write ``tensors`` (name -> array, cast to float32) and JSON metadata atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: np.ascontiguousarray(v, dtype=_LE_F32) for k, v in tensors.items()}
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "tensors": {k: {"shape": list(a.shape), "dtype": "<f4"} for k, a in sorted(arrays.items())},
        "sections": sorted({k.split(".", 1)[0] for k in arrays}),
        "content_hash": content_hash(arrays),
        **meta,
    }
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
        for name, arr in sorted(arrays.items()):
            zf.writestr(f"tensors/{name}.f32", arr.tobytes())
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(tensors, manifest)``; the content hash is verified."""
    path = Path(path)
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc}") from exc
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except KeyError:
            raise CheckpointError(f"{path} has no manifest.json") from None
        if manifest.get("format") != FORMAT:
            raise CheckpointError(f"{path} is not a {FORMAT} archive")
        if manifest.get("version") != VERSION:
            raise CheckpointVersionError(
                f"{path} has format version {manifest.get('version')}, this build reads version {VERSION}; "
                f"migrate it explicitly before loading")
        tensors = {}
        for name, info in manifest["tensors"].items():
            buf = zf.read(f"tensors/{name}.f32")
            tensors[name] = np.frombuffer(buf, dtype=_LE_F32).reshape(info["shape"]).copy()
    if content_hash(tensors) != manifest.get("content_hash"):
        raise CheckpointError(f"{path} content hash mismatch (corrupted archive)")
    return tensors, manifest


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
