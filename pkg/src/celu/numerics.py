"""Dense matrix kernel.

Matrices are plain 2-D ``float64`` numpy arrays in row-major (C) order.  The
helpers here add the shape checks and corner-case rules the rest of the
package relies on; none of them modify their inputs.
"""
from __future__ import annotations

import numpy as np

from .errors import ShapeError

ZERO_NORM_EPS = 1e-12


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    m = np.ascontiguousarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


def row_cosine(u, v, eps: float = ZERO_NORM_EPS) -> np.ndarray:
    """Cosine similarity of each row of ``u`` with the same row of ``v``.

    A pair of (near) zero rows counts as identical (1.0); a single zero row is
    treated as uninformative (0.0).  Results are clamped to [-1, 1].
    """
    u = as_matrix(u, "u")
    v = as_matrix(v, "v")
    if u.shape != v.shape:
        raise ShapeError(f"row_cosine shape mismatch: {u.shape} vs {v.shape}")
    if u.shape[0] < 1:
        raise ShapeError("row_cosine needs at least one row")
    zu = np.sqrt(np.einsum("ij,ij->i", u, u)) < eps
    zv = np.sqrt(np.einsum("ij,ij->i", v, v)) < eps
    # cosine is scale free; normalising by the row max keeps the products finite
    u = u / np.maximum(np.abs(u).max(axis=1, keepdims=True), np.finfo(float).tiny) if u.shape[1] else u
    v = v / np.maximum(np.abs(v).max(axis=1, keepdims=True), np.finfo(float).tiny) if v.shape[1] else v
    uu = np.einsum("ij,ij->i", u, u)
    vv = np.einsum("ij,ij->i", v, v)
    dot = np.einsum("ij,ij->i", u, v)
    safe = ~(zu | zv)
    out = np.zeros(u.shape[0])
    # sqrt of the product keeps identical rows at exactly 1
    out[safe] = dot[safe] / np.sqrt(uu[safe] * vv[safe])
    out[zu & zv] = 1.0
    return np.clip(out, -1.0, 1.0)


def scale_rows(m, w) -> np.ndarray:
    m = as_matrix(m)
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if w.shape[0] != m.shape[0]:
        raise ShapeError(f"scale_rows: {w.shape[0]} weights for {m.shape[0]} rows")
    return m * w[:, None]


def flat_cosine(a, b, eps: float = ZERO_NORM_EPS) -> float | None:
    """Cosine of two flattened arrays; ``None`` when either has zero norm."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ShapeError(f"flat_cosine length mismatch: {a.size} vs {b.size}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < eps or nb < eps:
        return None
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))
