"""Dense linear-algebra kernels shared by the whole package.

Everything operates on 2-D float64 numpy arrays (row-major). All functions
are pure; callers never see mutated inputs.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a C-contiguous 2-D float64 array, or raise ShapeError."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name}: expected 2-D array, got shape {m.shape}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit shape check."""
    a = as_matrix(a, "matmul lhs")
    b = as_matrix(b, "matmul rhs")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction.

    Rows containing -inf entries are handled (the -inf positions get weight
    zero), which is what the causal attention mask relies on.
    """
    m = np.asarray(m, dtype=np.float64)
    shifted = m - np.max(m, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def silu(x: np.ndarray) -> np.ndarray:
    """x * sigmoid(x), stable for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    return x * expit(x)


def swiglu(z: np.ndarray, w1: np.ndarray, w3: np.ndarray) -> np.ndarray:
    """Gated feed-forward activation: silu(z @ w1) * (z @ w3)."""
    z = as_matrix(z, "swiglu input")
    w1 = as_matrix(w1, "swiglu w1")
    w3 = as_matrix(w3, "swiglu w3")
    if w1.shape != w3.shape:
        raise ShapeError(f"swiglu: w1 shape {w1.shape} != w3 shape {w3.shape}")
    return silu(matmul(z, w1)) * matmul(z, w3)


def top_k(v: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries, in descending value order.

    Ties are broken toward the lower index (stable sort on the negated
    values), so results are deterministic.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"top_k: expected 1-D vector, got shape {v.shape}")
    if not 1 <= k <= v.shape[0]:
        raise ShapeError(f"top_k: k={k} out of range for length {v.shape[0]}")
    return np.argsort(-v, kind="stable")[:k]
