"""Versioned binary checkpoint container.

Layout: 8-byte magic, u32 format version, u64 manifest length, manifest
JSON (sorted keys), raw tensor bytes, then an 8-byte blake2b checksum of
everything before it. save(load(save(x))) is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError

MAGIC = b"LNCRCKPT"
FORMAT_VERSION = 1

_DTYPE_CODES = {"<f4": np.float32, "<f8": np.float64}


@dataclass
class Checkpoint:
    kind: str
    config: dict
    tensors: dict[str, np.ndarray]
    config_hash: str = ""
    extra: dict = field(default_factory=dict)


def _checksum(blob: bytes) -> bytes:
    return hashlib.blake2b(blob, digest_size=8).digest()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    entries = []
    offset = 0
    blobs = []
    for name, arr in ckpt.tensors.items():
        arr = np.ascontiguousarray(arr)
        code = arr.dtype.newbyteorder("<").str
        if code not in _DTYPE_CODES:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw = arr.astype(code).tobytes()
        entries.append(
            {"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "kind": ckpt.kind,
        "config": ckpt.config,
        "config_hash": ckpt.config_hash,
        "extra": ckpt.extra,
        "tensors": entries,
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(mbytes)) + mbytes + b"".join(blobs)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(_checksum(body))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 12 + 8:
        raise CheckpointError(f"{path}: truncated checkpoint")
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = blob[:-8], blob[-8:]
    if _checksum(body) != digest:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    version, mlen = struct.unpack("<IQ", body[len(MAGIC) : len(MAGIC) + 12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    mstart = len(MAGIC) + 12
    manifest = json.loads(body[mstart : mstart + mlen].decode("utf-8"))
    data = body[mstart + mlen :]
    tensors: dict[str, np.ndarray] = {}
    for e in manifest["tensors"]:
        raw = data[e["offset"] : e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{path}: tensor {e['name']!r} data is truncated")
        arr = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).copy()
        tensors[e["name"]] = arr
    return Checkpoint(
        kind=manifest["kind"],
        config=manifest["config"],
        tensors=tensors,
        config_hash=manifest.get("config_hash", ""),
        extra=manifest.get("extra", {}),
    )


def file_hash(path) -> str:
    """Hash of a whole artifact file, used to tie downstream artifacts to it."""
    h = hashlib.blake2b(digest_size=8)
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
