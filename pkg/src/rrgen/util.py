"""Hashing, seeding, and canonical-JSON helpers shared across the pipeline."""

from __future__ import annotations

import hashlib
import json
import os
from typing import Any, Iterable

import torch


def canonical_json(obj: Any) -> str:
    """Stable JSON text: sorted keys, no whitespace drift, no NaN."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def multiset_hash(items: Iterable[str]) -> str:
    """Order-independent digest of a multiset of strings."""
    return sha256_text("\x00".join(sorted(items)))


def derive_seed(base_seed: int, *scope: str | int) -> int:
    """Stable sub-seed for a named component, independent of call order."""
    tag = ":".join(str(s) for s in (base_seed, *scope))
    return int.from_bytes(hashlib.sha256(tag.encode("utf-8")).digest()[:8], "little") % (2**31)


def set_determinism(seed: int) -> None:
    """Single-threaded torch with a fixed seed; makes runs bit-reproducible."""
    torch.set_num_threads(1)
    torch.manual_seed(seed)
