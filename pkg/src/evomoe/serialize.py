"""JSON (de)serialization helpers for matrices and on-disk documents.

Floats go through Python's shortest-round-trip repr, so save -> load -> save
is byte-identical and values survive bit-exactly.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .linalg import ShapeError


class FormatError(ValueError):
    """Raised for malformed or inconsistent on-disk documents."""


def matrix_to_json(m: np.ndarray) -> dict:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"matrix_to_json: expected 2-D array, got {m.shape}")
    return {"rows": int(m.shape[0]), "cols": int(m.shape[1]), "data": m.ravel().tolist()}


def matrix_from_json(obj, expect_shape: tuple[int, int] | None = None) -> np.ndarray:
    if not isinstance(obj, dict) or not {"rows", "cols", "data"} <= set(obj):
        raise FormatError(f"matrix entry must have rows/cols/data, got {type(obj).__name__}")
    rows, cols, data = obj["rows"], obj["cols"], obj["data"]
    if len(data) != rows * cols:
        raise FormatError(f"matrix data length {len(data)} != rows*cols = {rows * cols}")
    m = np.asarray(data, dtype=np.float64).reshape(rows, cols)
    if not np.all(np.isfinite(m)):
        raise FormatError("matrix contains non-finite entries")
    if expect_shape is not None and m.shape != expect_shape:
        raise FormatError(f"matrix shape {m.shape} does not match expected {expect_shape}")
    return m


def dumps_json(obj) -> str:
    try:
        return json.dumps(obj, indent=1, allow_nan=False) + "\n"
    except ValueError as exc:
        raise FormatError(f"refusing to serialize non-finite value: {exc}") from exc


def dump_json(obj, path: str | os.PathLike) -> None:
    text = dumps_json(obj)
    with open(path, "w") as f:
        f.write(text)


def load_json(path: str | os.PathLike):
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed JSON in {path}: {exc}") from exc
