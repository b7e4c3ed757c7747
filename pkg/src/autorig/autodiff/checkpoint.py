"""Named-tensor container.

Layout: one line of JSON holding ``[[name, shape], ...]``, a newline, then
each tensor's values as little-endian float64 in header order.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np


class CheckpointError(ValueError):
    pass


def save_tensors(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    header = [[name, list(np.shape(arr))] for name, arr in tensors.items()]
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode() + b"\n")
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: missing header")
    try:
        header = json.loads(raw[:nl])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: bad header: {exc}") from None
    out: dict[str, np.ndarray] = {}
    offset = nl + 1
    for name, shape in header:
        n = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * n
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated data for tensor '{name}'")
        out[name] = np.frombuffer(raw[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return out
