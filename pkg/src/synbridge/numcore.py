"""Dense float64 vector primitives: normalization, cosine scores, softmax, KL
and a central-difference gradient oracle.

Functions accept anything ``np.asarray`` understands and return fresh arrays;
inputs are never modified.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import NonFinite, ShapeMismatch, SupportMismatch, ZeroNorm

EPS = 1e-12


def as_vector(v, name: str = "vector") -> np.ndarray:
    arr = np.array(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ShapeMismatch(f"{name} must be a non-empty 1-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFinite(f"{name} contains NaN or Inf")
    return arr


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    arr = np.array(m, dtype=np.float64)
    if arr.ndim != 2 or 0 in arr.shape:
        raise ShapeMismatch(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFinite(f"{name} contains NaN or Inf")
    return arr


def l2_normalize(v) -> np.ndarray:
    """Scale ``v`` to unit Euclidean norm.

    Raises:
        ZeroNorm: if ``||v|| <= 1e-12``.
    """
    v = as_vector(v)
    n = np.linalg.norm(v)
    if n <= EPS:
        raise ZeroNorm(f"cannot normalize vector with norm {n:.3g}")
    return v / n


def normalize_rows(m) -> np.ndarray:
    m = as_matrix(m)
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    bad = np.flatnonzero(norms[:, 0] <= EPS)
    if bad.size:
        raise ZeroNorm(f"rows {bad.tolist()} have zero norm")
    return m / norms


def cosine_similarity(a, b) -> float:
    a, b = as_vector(a, "a"), as_vector(b, "b")
    if a.shape != b.shape:
        raise ShapeMismatch(f"length mismatch {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= EPS or nb <= EPS:
        raise ZeroNorm("cosine of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_distance(a, b) -> float:
    """``1 - cosine_similarity(a, b)``; lies in ``[0, 2]``."""
    return 1.0 - cosine_similarity(a, b)


def cosine_matrix(x, w) -> np.ndarray:
    """Pairwise cosines between the rows of ``x`` and the rows of ``w``."""
    return normalize_rows(x) @ normalize_rows(w).T


def softmax(v, temperature: float = 1.0) -> np.ndarray:
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = as_vector(v) / temperature
    e = np.exp(z - z.max())
    return e / e.sum()


def softmax_rows(m, temperature: float = 1.0) -> np.ndarray:
    """Row-wise softmax of a 2-D array (no finiteness re-check, used in hot loops)."""
    z = np.asarray(m, dtype=np.float64) / temperature
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats, with ``0 * log(0 / q) = 0``."""
    p, q = as_vector(p, "p"), as_vector(q, "q")
    if p.shape != q.shape:
        raise ShapeMismatch(f"length mismatch {p.size} vs {q.size}")
    mask = p > 0
    if np.any(q[mask] <= 0):
        raise SupportMismatch("q is zero where p has mass")
    return float(max(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))), 0.0))


def finite_difference_gradient(
    f: Callable[[np.ndarray], float], x, h: float = 1e-6
) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (any shape)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a, b, floor: float = 1e-12) -> float:
    """``||a - b|| / max(||a||, ||b||)`` over all entries, the usual gradient-check ratio."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def unit_rows(m):
    """Normalize along the last axis; returns ``(unit, norms)`` for use with
    :func:`unit_rows_backward`."""
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    if np.any(norms <= EPS):
        raise ZeroNorm("cannot normalize a zero vector")
    return m / norms, norms


def unit_rows_backward(grad_unit, unit, norms):
    """Gradient through ``x -> x / ||x||`` given the forward outputs."""
    radial = np.sum(grad_unit * unit, axis=-1, keepdims=True)
    return (grad_unit - radial * unit) / norms
