"""Dense primitives shared by the whole package.

All activations are float64. Products go through :func:`matmul`, which
accumulates over the inner dimension strictly left to right so results are
bit-reproducible and independent of the BLAS build.
"""

from __future__ import annotations

import numpy as np

NORM_EPS = 1e-12


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class UndefinedCorrelationError(ValueError):
    """Correlation requested for a series with zero variance."""


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a fixed left-to-right summation order over k.

    Each output entry is ``((0 + a[i,0]*b[0,j]) + a[i,1]*b[1,j]) + ...``,
    which is exactly what a naive triple loop computes.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    tmp = np.empty_like(out)
    cols = np.ascontiguousarray(a.T)
    rows = np.ascontiguousarray(b)
    for k in range(a.shape[1]):
        np.multiply(cols[k, :, None], rows[None, k, :], out=tmp)
        out += tmp
    return out


def matvec(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``w @ x`` for a single vector, same summation order as :func:`matmul`."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {x.shape}")
    return matmul(x[None, :], np.asarray(w, dtype=np.float64).T)[0]


def softmax(v: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax along the last axis."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0 or v.shape[-1] == 0:
        raise ShapeError("softmax of an empty vector")
    z = np.exp(v - v.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def topk_indices(probs: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries along the last axis.

    Ties go to the lower index. Works row-wise on 2-D input.
    """
    probs = np.asarray(probs, dtype=np.float64)
    n = probs.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    # stable sort on the negated values keeps lower indices first among ties
    order = np.argsort(-probs, axis=-1, kind="stable")
    return order[..., :k]


def topk_mask(probs: np.ndarray, k: int, renormalize: bool = False) -> np.ndarray:
    """Zero everything but the top-k entries (row-wise for 2-D input).

    Kept entries retain their input values unless ``renormalize`` is set, in
    which case they are rescaled to sum to one.
    """
    probs = np.asarray(probs, dtype=np.float64)
    idx = topk_indices(probs, k)
    out = np.zeros_like(probs)
    np.put_along_axis(out, idx, np.take_along_axis(probs, idx, axis=-1), axis=-1)
    if renormalize:
        out = out / out.sum(axis=-1, keepdims=True)
    return out


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; 0.0 when either vector has norm below 1e-12."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < NORM_EPS or nb < NORM_EPS:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def rowwise_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine similarity of matching rows of two 2-D arrays, zero-norm rule applied."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (na >= NORM_EPS) & (nb >= NORM_EPS)
    out = np.zeros(a.shape[0])
    out[ok] = np.einsum("ij,ij->i", a[ok], b[ok]) / (na[ok] * nb[ok])
    return np.clip(out, -1.0, 1.0)


def pearson(xs, ys) -> float:
    """Pearson correlation coefficient of two equal-length series."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError(f"pearson needs equal-length series, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise ShapeError("pearson needs at least two samples")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("zero variance in one of the series")
    return float(np.clip(np.dot(dx, dy) / np.sqrt(sxx * syy), -1.0, 1.0))


def silu(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    with np.errstate(over="ignore"):
        return z / (1.0 + np.exp(-z))
