"""Versioned single-file checkpoint container.

Layout: 4-byte magic, uint32 format version, uint64 header length, a JSON
header (kind, metadata, tensor index), then raw little-endian tensor bytes.
Writing is canonical (sorted tensor names, sorted JSON keys), so an
unchanged state always serializes to byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"PSKC"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    """Unreadable checkpoint: bad magic, version mismatch, or truncation."""


def _to_array(value) -> np.ndarray:
    if torch.is_tensor(value):
        value = value.detach().cpu().contiguous().numpy()
    arr = np.asarray(value)
    # force little-endian on-disk representation
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def save_tensor_file(path, kind: str, meta: dict, tensors: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = _to_array(tensors[name])
        blob = arr.tobytes()
        index.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"kind": kind, "meta": meta, "tensors": index},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    return path


def load_tensor_file(path):
    """Read a checkpoint; returns (kind, meta, {name: np.ndarray})."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated (no header prefix)")
    magic, version, header_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version mismatch: file has {version}, reader supports {FORMAT_VERSION}"
        )
    header_end = _PREFIX.size + header_len
    if len(data) < header_end:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[_PREFIX.size:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    payload = data[header_end:]
    tensors = {}
    total = 0
    for ent in header["tensors"]:
        lo, hi = ent["offset"], ent["offset"] + ent["nbytes"]
        if hi > len(payload):
            raise CheckpointError(f"{path}: truncated payload at tensor {ent['name']!r}")
        arr = np.frombuffer(payload[lo:hi], dtype=np.dtype(ent["dtype"]))
        tensors[ent["name"]] = arr.reshape(ent["shape"]).copy()
        total = max(total, hi)
    if total != len(payload):
        raise CheckpointError(f"{path}: payload size mismatch")
    return header["kind"], header["meta"], tensors


def tensors_sha256(tensors: dict) -> str:
    """Order-independent content hash of a named tensor collection."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = _to_array(tensors[name])
        h.update(name.encode("utf-8"))
        h.update(str(arr.dtype.str).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def module_sha256(module: torch.nn.Module) -> str:
    """Content hash of a torch module's named parameters and buffers."""
    named = dict(module.state_dict())
    return tensors_sha256(named)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
