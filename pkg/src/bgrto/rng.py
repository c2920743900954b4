"""Splittable, counter-based random streams.

Every random decision in the project draws from a Philox generator keyed by a
tuple such as (run_seed, "rollout", scene_index, rollout_index).  Streams are
independent of evaluation order, so parallel and serial generation produce the
same artifacts.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _encode_part(part) -> bytes:
    if isinstance(part, (int, np.integer)):
        return b"i" + str(int(part)).encode("ascii")
    if isinstance(part, str):
        return b"s" + part.encode("utf-8")
    raise TypeError(f"rng stream key parts must be int or str, got {type(part).__name__}")


def stream_key(*parts) -> bytes:
    """Collision-resistant canonical encoding of a key tuple."""
    pieces = []
    for part in parts:
        enc = _encode_part(part)
        pieces.append(str(len(enc)).encode("ascii") + b":" + enc)
    return b"|".join(pieces)


def stream(*parts) -> np.random.Generator:
    """Return an independent Generator for the given key tuple."""
    digest = hashlib.sha256(stream_key(*parts)).digest()
    key = np.frombuffer(digest[:16], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def derive_seed(*parts) -> int:
    """A stable 63-bit seed derived from a key tuple (for storable scene seeds)."""
    digest = hashlib.sha256(stream_key(*parts)).digest()
    return int.from_bytes(digest[16:24], "little") >> 1


def choice(gen: np.random.Generator, weights: np.ndarray) -> int:
    """Sample an index from unnormalized non-negative weights via the CDF."""
    w = np.asarray(weights, dtype=np.float64)
    total = float(w.sum())
    if not total > 0.0:
        raise ValueError("choice requires positive total weight")
    u = gen.random() * total
    return int(np.searchsorted(np.cumsum(w), u, side="right").clip(0, len(w) - 1))
