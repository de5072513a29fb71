"""
WindowQuant -- Dense numerics.

Thin, validated wrappers over numpy used by every other module. A ``Matrix``
is a 2-D float64 ``numpy.ndarray`` with its writeable flag cleared, so values
handed between modules cannot be mutated behind a caller's back. Transposes
and slices that leave this module are explicit copies.
"""
import math

import numpy as np
import numpy.typing as npt

from windowquant.errors import DegenerateEmbeddingError, NonFiniteError, ShapeError

Matrix = npt.NDArray[np.float64]
Vector = npt.NDArray[np.float64]

# Additive mask value; -inf would give NaN from inf - inf under stabilisation.
MASK_SENTINEL = -1e9


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def as_matrix(data) -> Matrix:
    """Copy ``data`` into a read-only float64 matrix, rejecting NaN/Inf."""
    arr = np.array(data, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 0:
        arr = arr.reshape(0, 0)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"matrix of shape {arr.shape} contains non-finite entries")
    return _freeze(arr)


def as_vector(data) -> Vector:
    arr = np.array(data, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"vector of length {arr.size} contains non-finite entries")
    return _freeze(arr)


def identity(n: int) -> Matrix:
    return _freeze(np.eye(n, dtype=np.float64))


def zeros(rows: int, cols: int) -> Matrix:
    return _freeze(np.zeros((rows, cols), dtype=np.float64))


def transpose(a: Matrix) -> Matrix:
    return _freeze(np.ascontiguousarray(a.T))


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Standard matrix product ``a @ b``."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return _freeze(a @ b)


def scaled_scores(q: Matrix, k: Matrix, d_k: int) -> Matrix:
    """Attention logits ``q kᵀ / sqrt(d_k)``."""
    if d_k < 1:
        raise ShapeError(f"d_k must be >= 1, got {d_k}")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"q {q.shape} and k {k.shape} differ in column count")
    return _freeze(matmul(q, transpose(k)) / math.sqrt(d_k))


def softmax_rows(a: Matrix) -> Matrix:
    """Row-wise softmax, stabilised by subtracting each row's maximum."""
    shifted = a - a.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return _freeze(e / e.sum(axis=1, keepdims=True))


def causal_mask(n: int) -> Matrix:
    """n×n additive mask: 0 on/below the diagonal, ``MASK_SENTINEL`` above."""
    if n < 1:
        raise ShapeError(f"mask size must be >= 1, got {n}")
    return _freeze(np.triu(np.full((n, n), MASK_SENTINEL), k=1))


def cosine_sim(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise ShapeError(f"cosine of vectors with lengths {u.size} and {v.size}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateEmbeddingError("cosine similarity of a zero-norm vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def normalize_rows(a: Matrix) -> Matrix:
    """Scale every row to unit L2 norm; zero rows are an error."""
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateEmbeddingError("cannot normalise a zero-norm row")
    return _freeze(a / norms)


def pairwise_cosine(a: Matrix, b: Matrix) -> Matrix:
    """Cosine similarity of every row of ``a`` against every row of ``b``."""
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"embedding dims differ: {a.shape} vs {b.shape}")
    return matmul(normalize_rows(a), transpose(normalize_rows(b)))


def relative_error(actual, expected) -> float:
    """max|actual − expected| / max|expected| (absolute when expected is ~0)."""
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    if actual.shape != expected.shape:
        raise ShapeError(f"cannot compare shapes {actual.shape} and {expected.shape}")
    if actual.size == 0:
        return 0.0
    denom = float(np.max(np.abs(expected)))
    diff = float(np.max(np.abs(actual - expected)))
    return diff / denom if denom > 1e-30 else diff
