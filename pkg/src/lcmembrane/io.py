"""Serialization: flat binary field dumps, CSV tables and JSON reports.

Binary layout (little-endian): ``int64 n1, int64 n2, float64 L1, float64 L2``
followed by any number of row-major ``float64`` blocks of ``n1 * n2`` values.
A bundle or a time history is written as consecutive blocks; the reader
returns them stacked as ``(nblocks, n1, n2)``.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .grid import Grid2D, SpacetimeField

__all__ = ["write_field", "read_field", "write_csv", "read_csv", "write_json", "to_jsonable"]

_HEADER = np.dtype([("n1", "<i8"), ("n2", "<i8"), ("L1", "<f8"), ("L2", "<f8")])


def write_field(path, data, grid: Grid2D) -> Path:
    """Dump an array whose last two axes are ``grid.shape``."""
    arr = np.asarray(data.data if isinstance(data, SpacetimeField) else data, dtype="<f8")
    if arr.shape[-2:] != grid.shape:
        raise ValueError(f"array shape {arr.shape} does not end in {grid.shape}")
    path = Path(path)
    head = np.array([(grid.n1, grid.n2, grid.L1, grid.L2)], dtype=_HEADER)
    with open(path, "wb") as fh:
        fh.write(head.tobytes())
        fh.write(np.ascontiguousarray(arr).tobytes())
    return path


def read_field(path) -> tuple[np.ndarray, Grid2D]:
    """Inverse of :func:`write_field`; returns ``(blocks, grid)``."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.itemsize:
        raise ValueError("file too short for the header")
    head = np.frombuffer(raw[: _HEADER.itemsize], dtype=_HEADER)[0]
    n1, n2 = int(head["n1"]), int(head["n2"])
    body = np.frombuffer(raw[_HEADER.itemsize:], dtype="<f8")
    if n1 <= 0 or n2 <= 0 or body.size % (n1 * n2):
        raise ValueError("payload size is not a whole number of blocks")
    grid = Grid2D(n1, n2, float(head["L1"]), float(head["L2"]))
    return body.reshape(-1, n1, n2).astype(float), grid


def write_csv(path, columns: dict) -> Path:
    """Write equal-length columns with a header row (``repr`` precision)."""
    keys = list(columns)
    cols = [np.asarray(columns[k]).ravel() for k in keys]
    n = {len(c) for c in cols}
    if len(n) > 1:
        raise ValueError("columns differ in length")
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for row in zip(*cols):
            w.writerow([repr(float(x)) for x in row])
    return path


def read_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return {}
    head, body = rows[0], rows[1:]
    return {k: np.array([float(r[i]) for r in body]) for i, k in enumerate(head)}


def to_jsonable(obj):
    """Recursively convert numpy scalars/arrays; non-finite floats become strings."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    return obj


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(to_jsonable(obj), indent=2, sort_keys=True))
    return path
