"""Deterministic JSON and raw-array persistence helpers.

All JSON written by this package goes through canonical_dumps: sorted keys,
fixed separators, no timestamps, floats serialized by Python repr (shortest
round-trip, so load(dump(x)) == x bitwise for float64). Binary blobs are
little-endian and carry no metadata; shape lives in the adjacent JSON.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def jsonable(obj):
    """Recursively convert numpy scalars/arrays to plain Python values."""
    if isinstance(obj, np.ndarray):
        return [jsonable(v) for v in obj.tolist()] if obj.ndim else obj.item()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    return obj


def canonical_dumps(obj) -> str:
    return json.dumps(jsonable(obj), sort_keys=True, indent=2,
                      separators=(",", ": "), allow_nan=False)


def compact_dumps(obj) -> str:
    """Single-line canonical JSON, for .jsonl records."""
    return json.dumps(jsonable(obj), sort_keys=True, separators=(",", ":"),
                      allow_nan=False)


def write_json(path: Path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_dumps(obj) + "\n")


def read_json(path: Path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing file: {path}")
    return json.loads(path.read_text())


def write_f32_blob(path: Path, arr: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_f32_blob(path: Path, shape: tuple) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing file: {path}")
    data = np.frombuffer(path.read_bytes(), dtype="<f4")
    expected = int(np.prod(shape))
    if data.size != expected:
        raise ValueError(f"{path}: holds {data.size} values, expected {expected}")
    return data.reshape(shape).copy()


def write_f64_blob(path: Path, arrays) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
