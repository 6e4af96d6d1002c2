"""Checkpoint files: a JSON header plus one little-endian float64 blob.

A checkpoint is a directory holding ``header.json`` and ``tensors.bin``.
The header lists every tensor's name, shape and byte offset into the blob,
together with the training step, a hash of the run configuration and any
extra metadata needed to resume.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import CheckpointError

HEADER = "header.json"
BLOB = "tensors.bin"
DTYPE = "<f8"


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def write_checkpoint(path, tensors: dict[str, np.ndarray], step: int, cfg_hash: str, meta: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names, shapes, offsets = [], [], []
    offset = 0
    with open(path / BLOB, "wb") as f:
        for name, arr in tensors.items():
            data = np.ascontiguousarray(arr, dtype=DTYPE)
            names.append(name)
            shapes.append(list(data.shape))
            offsets.append(offset)
            f.write(data.tobytes())
            offset += data.nbytes
    header = {
        "names": names,
        "shapes": shapes,
        "offsets": offsets,
        "dtype": DTYPE,
        "step": step,
        "config_hash": cfg_hash,
        "meta": meta or {},
    }
    with open(path / HEADER, "w") as f:
        json.dump(header, f, indent=1, sort_keys=True)
    return path


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        with open(path / HEADER) as f:
            header = json.load(f)
        blob = (path / BLOB).read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if header.get("dtype") != DTYPE:
        raise CheckpointError(f"unsupported tensor dtype {header.get('dtype')}")
    tensors = {}
    for name, shape, offset in zip(header["names"], header["shapes"], header["offsets"]):
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(blob):
            raise CheckpointError(f"tensor {name} runs past the end of the blob")
        tensors[name] = np.frombuffer(blob, dtype=DTYPE, count=count, offset=offset).reshape(shape).astype(np.float64)
    return tensors, header
