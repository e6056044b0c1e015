"""Dense kernels: fixed-order matmul, softmax, Swish and the SwiGLU expert.

Matrices are plain 2-D numpy arrays in C (row-major) order with dtype
float32 or float64. Accumulation order inside :func:`matmul` is pinned so
that equivalence tests are reproducible bit-for-bit.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def as_matrix(a, dtype=None) -> np.ndarray:
    """Coerce ``a`` to a contiguous 2-D float matrix."""
    arr = np.asarray(a, dtype=dtype)
    if arr.dtype not in SUPPORTED_DTYPES:
        arr = arr.astype(np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {arr.shape}")
    return np.ascontiguousarray(arr)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a deterministic accumulation order.

    Each output element is accumulated as ``((a[i,0]*b[0,j] + a[i,1]*b[1,j]) + ...)``
    starting from zero, i.e. exactly the order of a naive triple loop. The
    loop over the shared dimension is in Python; rows and columns are
    vectorised, which does not change per-element rounding.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    dtype = np.result_type(a.dtype, b.dtype)
    out = np.zeros((m, n), dtype=dtype)
    if m == 0 or n == 0:
        return out
    at = np.ascontiguousarray(a.T, dtype=dtype)
    b = np.asarray(b, dtype=dtype)
    term = np.empty((m, n), dtype=dtype)
    for p in range(k):
        np.multiply(at[p][:, None], b[p][None, :], out=term)
        out += term
    return out


def softmax(logits) -> np.ndarray:
    v = np.asarray(logits)
    if v.ndim != 1:
        raise ShapeError(f"softmax expects a vector, got shape {v.shape}")
    if v.size == 0:
        raise ShapeError("softmax of an empty vector")
    return softmax_rows(v[None, :])[0]


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {logits.shape}")
    if logits.shape[1] == 0:
        raise ShapeError("softmax over zero columns")
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def sigmoid(x) -> np.ndarray:
    # exp of a non-positive argument never overflows.
    x = np.atleast_1d(np.asarray(x))
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def swish(x):
    """``x * sigmoid(x)``; accepts scalars or arrays."""
    arr = np.asarray(x)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    out = arr * sigmoid(arr).reshape(arr.shape)
    return out[()] if out.ndim == 0 else out


def swiglu_hidden(x: np.ndarray, w1: np.ndarray, w3: np.ndarray) -> np.ndarray:
    """Pre-down-projection activations ``Swish(x W1) * (x W3)``."""
    if w1.shape != w3.shape:
        raise ShapeError(f"W1 {w1.shape} and W3 {w3.shape} differ")
    # One product over [W1 | W3]; columns are independent, so each half is
    # bit-identical to its own matmul.
    d = w1.shape[1]
    both = matmul(x, np.concatenate([w1, w3], axis=1))
    return swish(both[:, :d]) * both[:, d:]


def swiglu_forward(x: np.ndarray, w1: np.ndarray, w3: np.ndarray, w2: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != w1.shape[0]:
        raise ShapeError(f"token matrix {x.shape} incompatible with W1 {w1.shape}")
    if w2.shape != (w1.shape[1], w1.shape[0]):
        raise ShapeError(f"W2 {w2.shape} incompatible with W1 {w1.shape}")
    return matmul(swiglu_hidden(x, w1, w3), w2)
