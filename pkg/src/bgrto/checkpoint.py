"""Binary checkpoint persistence.

Layout: magic "BGRTO\\0", format version (4-byte LE unsigned), length-prefixed
UTF-8 JSON metadata, then per tensor: name length (4B LE), name bytes, rank
(4B LE), dims (8B LE each), values as little-endian IEEE-754 float64.  Tensors
are written in lexicographic name order and the count is carried in the
metadata, so truncation is always detectable.  Writes go through a temp file
and an atomic rename.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import NamedParams

MAGIC = b"BGRTO\x00"
FORMAT_VERSION = 1


class CheckpointFormatError(ValueError):
    """Checkpoint file rejected: bad magic, version, hash, or truncation."""


@dataclass
class Checkpoint:
    metadata: dict
    params: NamedParams


def params_digest(params: NamedParams) -> str:
    """Content hash of a parameter set (used as a checkpoint identity)."""
    h = hashlib.sha256()
    for name, arr in params.items():
        h.update(name.encode("utf-8"))
        h.update(str(arr.shape).encode("ascii"))
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


def save_checkpoint(path: str, metadata: dict, params: NamedParams) -> None:
    meta = dict(metadata)
    meta["tensor_count"] = len(params)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        for name, arr in params.items():
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    os.replace(tmp, path)


def _read_exact(fh, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path: str, expected_compat_hash: str | None = None) -> Checkpoint:
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise CheckpointFormatError(f"cannot read checkpoint {path}: {exc}") from exc
    with fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointFormatError(f"bad magic in {path}: {magic!r}")
        version = struct.unpack("<I", _read_exact(fh, 4, "version"))[0]
        if version != FORMAT_VERSION:
            raise CheckpointFormatError(
                f"checkpoint version mismatch: file has {version}, reader expects {FORMAT_VERSION}"
            )
        meta_len = struct.unpack("<I", _read_exact(fh, 4, "metadata length"))[0]
        try:
            metadata = json.loads(_read_exact(fh, meta_len, "metadata").decode("utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise CheckpointFormatError(f"corrupt checkpoint metadata in {path}: {exc}") from exc
        count = metadata.get("tensor_count")
        if not isinstance(count, int) or count < 0:
            raise CheckpointFormatError(f"checkpoint {path} metadata lacks a valid tensor_count")
        params = NamedParams()
        for _ in range(count):
            name_len = struct.unpack("<I", _read_exact(fh, 4, "tensor name length"))[0]
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            rank = struct.unpack("<I", _read_exact(fh, 4, "tensor rank"))[0]
            dims = tuple(
                struct.unpack("<Q", _read_exact(fh, 8, f"dims of {name}"))[0] for _ in range(rank)
            )
            size = int(np.prod(dims, dtype=np.int64)) if dims else 1
            raw = _read_exact(fh, size * 8, f"values of {name}")
            params[name] = np.frombuffer(raw, dtype="<f8").reshape(dims)
        if fh.read(1):
            raise CheckpointFormatError(f"trailing bytes after the last tensor in {path}")
    if expected_compat_hash is not None:
        found = metadata.get("compat_hash")
        if found != expected_compat_hash:
            raise CheckpointFormatError(
                f"config hash mismatch: checkpoint carries {found}, current config is {expected_compat_hash}"
            )
    return Checkpoint(metadata=metadata, params=params)


def split_params(params: NamedParams, prefix: str) -> NamedParams:
    """Sub-parameters whose names start with the given prefix."""
    return NamedParams((name, arr) for name, arr in params.items() if name.startswith(prefix))


def merge_params(*sections: NamedParams) -> NamedParams:
    merged = NamedParams()
    for section in sections:
        for name, arr in section.items():
            merged[name] = arr
    return merged
