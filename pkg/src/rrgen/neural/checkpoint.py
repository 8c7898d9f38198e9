"""Single-file checkpoint container: one JSON header line followed by raw
little-endian float32 tensor blobs in the header's declared order."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch import nn

from ..util import canonical_json

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _tensor_bytes(t: torch.Tensor) -> bytes:
    arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
    return arr.tobytes()


def state_hash(model: nn.Module, config: dict | None = None) -> str:
    """Content id of a model's parameters (and structural config)."""
    h = hashlib.sha256()
    if config is not None:
        h.update(canonical_json(config).encode("utf-8"))
    for name, t in model.state_dict().items():
        h.update(name.encode("utf-8"))
        h.update(_tensor_bytes(t))
    return h.hexdigest()[:16]


def save_checkpoint(
    model: nn.Module,
    path: str | Path,
    kind: str,
    config: dict,
    vocab_hash: str,
    lineage: Mapping[str, object] | None = None,
) -> str:
    """Write the model and return its checkpoint id."""
    state = model.state_dict()
    tensors = [
        {"name": name, "shape": list(t.shape), "dtype": "float32"}
        for name, t in state.items()
    ]
    checkpoint_id = state_hash(model, config)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "vocab_hash": vocab_hash,
        "lineage": dict(lineage or {}),
        "checkpoint_id": checkpoint_id,
        "tensors": tensors,
    }
    with open(path, "wb") as f:
        f.write(canonical_json(header).encode("utf-8") + b"\n")
        for name, t in state.items():
            f.write(_tensor_bytes(t))
    return checkpoint_id


def read_header(path: str | Path) -> dict:
    with open(path, "rb") as f:
        line = f.readline()
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable checkpoint header ({e})") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {version!r} not supported "
            f"(expected {FORMAT_VERSION})"
        )
    return header


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    """Read header and tensors; callers rebuild the model from header['config']."""
    header = read_header(path)
    tensors: dict[str, torch.Tensor] = {}
    with open(path, "rb") as f:
        f.readline()  # skip header
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(count * 4)
            if len(raw) != count * 4:
                raise CheckpointError(
                    f"{path}: truncated checkpoint, tensor {spec['name']!r} incomplete"
                )
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
            tensors[spec["name"]] = torch.from_numpy(arr)
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes after declared tensors")
    return header, tensors


def load_into(model: nn.Module, path: str | Path, expected_kind: str | None = None) -> dict:
    header, tensors = load_checkpoint(path)
    if expected_kind is not None and header["kind"] != expected_kind:
        raise CheckpointError(
            f"{path}: checkpoint kind {header['kind']!r}, expected {expected_kind!r}"
        )
    model.load_state_dict(tensors)
    return header
