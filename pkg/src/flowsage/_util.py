"""Shared helpers: stable seeding, hashing, canonical JSON."""
from __future__ import annotations

import hashlib
import json

import numpy as np


def stable_seed(*parts) -> int:
    """Derive a 64-bit seed from arbitrary parts, stable across runs and platforms.

    Python's builtin hash() is salted per process, so all seed derivation in
    this package goes through sha256 of the stringified parts instead.
    """
    key = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def seeded_rng(*parts) -> np.random.Generator:
    return np.random.default_rng(stable_seed(*parts))


def canonical_json(obj) -> str:
    """Deterministic JSON encoding: sorted keys, no whitespace jitter."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def fingerprint(obj) -> str:
    """Short stable hash of a JSON-serializable object."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
