"""Single-file tensor archive shared by checkpoints and backbone weights.

Layout::

    b"HAVARCH1"                 8-byte magic
    uint64 little-endian        length of the JSON manifest in bytes
    manifest (UTF-8 JSON)       {"meta": ..., "blobs": [{name, shape, offset, nbytes}],
                                 "content_hash": sha256 of the blob region}
    blob region                 concatenated little-endian float32 arrays

The manifest is written with sorted keys and no timestamps, so saving the same
tensors twice yields byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

from .errors import CorruptionError, FormatError

MAGIC = b"HAVARCH1"
_LEN = struct.Struct("<Q")


def _as_le_f32(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().to(torch.float32).numpy()
    # copy(order="C") rather than ascontiguousarray, which turns 0-d into 1-d
    return np.asarray(t, dtype="<f4").copy(order="C")


def encode(tensors: Mapping[str, Any], meta: Mapping[str, Any]) -> bytes:
    blobs = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = _as_le_f32(tensors[name])
        raw = arr.tobytes()
        blobs.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    region = b"".join(chunks)
    manifest = {
        "meta": meta,
        "blobs": blobs,
        "content_hash": hashlib.sha256(region).hexdigest(),
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + _LEN.pack(len(head)) + head + region


def decode(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    """Parse archive bytes into ``(tensors, manifest)``; verifies the content hash."""
    if len(data) < len(MAGIC) + _LEN.size or data[: len(MAGIC)] != MAGIC:
        raise FormatError("not a tensor archive (bad magic or truncated header)")
    (n,) = _LEN.unpack_from(data, len(MAGIC))
    start = len(MAGIC) + _LEN.size
    if start + n > len(data):
        raise FormatError("truncated archive manifest")
    try:
        manifest = json.loads(data[start:start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable archive manifest: {exc}") from exc
    region = data[start + n:]
    blobs = manifest.get("blobs")
    if not isinstance(blobs, list) or "content_hash" not in manifest:
        raise FormatError("archive manifest lacks blob index or content hash")
    expected_len = sum(b["nbytes"] for b in blobs)
    if len(region) != expected_len:
        raise FormatError(f"archive blob region is {len(region)} bytes, index says {expected_len}")
    if hashlib.sha256(region).hexdigest() != manifest["content_hash"]:
        raise CorruptionError("archive content hash mismatch")
    tensors = {}
    for b in blobs:
        count = int(np.prod(b["shape"])) if b["shape"] else 1
        if count * 4 != b["nbytes"]:
            raise FormatError(f"blob {b['name']}: shape {b['shape']} does not match {b['nbytes']} bytes")
        arr = np.frombuffer(region, dtype="<f4", count=count, offset=b["offset"])
        tensors[b["name"]] = arr.reshape(b["shape"]).astype(np.float32)
    return tensors, manifest


def save(path: str | Path, tensors: Mapping[str, Any], meta: Mapping[str, Any]) -> str:
    """Write an archive and return its content hash."""
    data = encode(tensors, meta)
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    tmp.replace(path)
    return content_hash(data)


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        return decode(f.read())


def content_hash(data: bytes) -> str:
    (n,) = _LEN.unpack_from(data, len(MAGIC))
    return hashlib.sha256(data[len(MAGIC) + _LEN.size + n:]).hexdigest()


def state_hash(tensors: Mapping[str, Any]) -> str:
    """Hash a name -> tensor mapping exactly as :func:`save` would."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(_as_le_f32(tensors[name]).tobytes())
    return h.hexdigest()
