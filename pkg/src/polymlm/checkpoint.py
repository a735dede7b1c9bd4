"""Versioned binary checkpoints: JSON header + named float64 tensors.

The header JSON is serialized canonically (sorted keys, no whitespace) and
tensor bytes are little-endian, so save(load(path)) reproduces the file
byte-for-byte.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import DataError
from .model import ModelConfig

MAGIC = b"PMLMCKPT"
FORMAT_VERSION = 1


def save_checkpoint(
    path,
    params: dict[str, np.ndarray],
    config: ModelConfig | None = None,
    meta: dict | None = None,
) -> None:
    names = list(params.keys())
    header = {
        "version": FORMAT_VERSION,
        "config": asdict(config) if config is not None else None,
        "meta": meta or {},
        "tensors": [{"name": n, "shape": list(np.asarray(params[n]).shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for n in names:
            arr = np.ascontiguousarray(np.asarray(params[n], dtype=np.float64))
            fh.write(arr.astype("<f8", copy=False).tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], ModelConfig | None, dict]:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    if raw[: len(MAGIC)] != MAGIC:
        raise DataError(f"not a checkpoint file: {path}")
    off = len(MAGIC)
    hlen = int.from_bytes(raw[off : off + 8], "little")
    off += 8
    try:
        header = json.loads(raw[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"corrupt checkpoint header in {path}: {e}") from e
    off += hlen
    if header.get("version") != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint version {header.get('version')} in {path}")
    params: dict[str, np.ndarray] = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if off + nbytes > len(raw):
            raise DataError(f"truncated checkpoint: {path}")
        arr = np.frombuffer(raw[off : off + nbytes], dtype="<f8").reshape(shape).copy()
        params[spec["name"]] = arr
        off += nbytes
    if off != len(raw):
        raise DataError(f"trailing bytes in checkpoint: {path}")
    config = ModelConfig(**header["config"]) if header["config"] is not None else None
    return params, config, header.get("meta", {})
