"""Binary weights container shared by all trained models.

Layout: magic "DDPW", version u16, u32 JSON-blob length, JSON blob (segment
index + free-form metadata), little-endian float32 payload, trailing sha256
of everything before it.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .nn import ParamStore

_MAGIC = b"DDPW"
_VERSION = 1
_HEAD = struct.Struct("<4sHI")


class WeightsError(ValueError):
    pass


def save_weights(store: ParamStore, path, metadata: dict | None = None) -> None:
    index = {
        name: {"offset": off, "shape": shape}
        for name, (off, shape) in store.segment_index().items()
    }
    blob = json.dumps(
        {"segments": index, "metadata": metadata or {}}, sort_keys=True
    ).encode()
    payload = store.flatten().astype("<f4").tobytes()
    body = _HEAD.pack(_MAGIC, _VERSION, len(blob)) + blob + payload
    with open(path, "wb") as f:
        f.write(body)
        f.write(hashlib.sha256(body).digest())


def load_weights(path) -> tuple[ParamStore, dict]:
    """Returns (store, metadata); verifies magic, version, and checksum."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEAD.size + 32:
        raise WeightsError("truncated weights file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise WeightsError("weights checksum mismatch")
    magic, version, blob_len = _HEAD.unpack_from(body, 0)
    if magic != _MAGIC:
        raise WeightsError(f"bad magic: {magic!r}")
    if version != _VERSION:
        raise WeightsError(f"unsupported version: {version}")
    blob = json.loads(body[_HEAD.size:_HEAD.size + blob_len])
    flat = np.frombuffer(body, dtype="<f4", offset=_HEAD.size + blob_len).astype(np.float64)
    store = ParamStore()
    segs = sorted(blob["segments"].items(), key=lambda kv: kv[1]["offset"])
    for name, seg in segs:
        n = int(np.prod(seg["shape"])) if seg["shape"] else 1
        store.add(name, flat[seg["offset"]:seg["offset"] + n].reshape(seg["shape"]))
    return store, blob["metadata"]
