"""Checkpoint container.

Layout (little-endian)::

    b"UCKP" | u32 version | u32 manifest length | manifest (UTF-8 JSON) | data

The manifest holds free-form ``meta`` and one entry per tensor with its
name, shape, byte offset into the data section and byte length. Data is
float32. Keys are written sorted, so identical parameters give identical
bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError

MAGIC = b"UCKP"
VERSION = 1
_HEAD = struct.Struct("<4sII")


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name]
        arr = (t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)).astype("<f4")
        data = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    manifest = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    Path(path).write_bytes(_HEAD.pack(MAGIC, VERSION, len(manifest)) + manifest + b"".join(blobs))


def load_checkpoint(path):
    """Returns ({name: float32 array}, meta)."""
    buf = Path(path).read_bytes()
    if len(buf) < _HEAD.size:
        raise FormatError("header", "file shorter than the header")
    magic, version, mlen = _HEAD.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError("magic", f"expected {MAGIC!r}, found {magic!r}")
    if version != VERSION:
        raise FormatError("version", f"unsupported version {version}")
    try:
        manifest = json.loads(buf[_HEAD.size:_HEAD.size + mlen])
    except ValueError as exc:
        raise FormatError("manifest", str(exc)) from None
    base = _HEAD.size + mlen
    out = {}
    try:
        for i, e in enumerate(manifest["tensors"]):
            start = base + e["offset"]
            if start + e["nbytes"] > len(buf):
                raise FormatError("data", f"tensor {e['name']} is truncated", record=i)
            out[e["name"]] = np.frombuffer(buf, "<f4", e["nbytes"] // 4, start).reshape(e["shape"]).copy()
        return out, manifest["meta"]
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError("manifest", f"malformed tensor table: {exc}") from None


def save_model(path, model: torch.nn.Module, meta: dict | None = None) -> None:
    save_checkpoint(path, model.state_dict(), meta)


def load_state(model: torch.nn.Module, tensors: dict) -> None:
    state = {k: torch.from_numpy(v) for k, v in tensors.items()}
    missing, unexpected = model.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise FormatError("tensors", f"missing {missing[:3]} unexpected {unexpected[:3]}")
