"""Small deterministic numeric primitives shared by every module.

Vectors and matrices are plain float64 numpy arrays; the helpers here only
add the validation and tie-breaking rules the cache mechanics rely on.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np


class DimensionMismatchError(ValueError):
    pass


class ZeroNormError(ValueError):
    pass


def as_vector(values: Sequence[float] | np.ndarray) -> np.ndarray:
    """Return ``values`` as a finite 1-D float64 array."""
    vec = np.asarray(values, dtype=np.float64)
    if vec.ndim != 1 or vec.size == 0:
        raise ValueError(f"expected a non-empty 1-D vector, got shape {vec.shape}")
    if not np.all(np.isfinite(vec)):
        raise ValueError("vector has non-finite entries")
    return vec


def cosine(a: Sequence[float] | np.ndarray, b: Sequence[float] | np.ndarray) -> float:
    """Cosine similarity clamped to [-1, 1].

    Raises DimensionMismatchError for unequal lengths and ZeroNormError if
    either input has zero norm.
    """
    a = as_vector(a)
    b = as_vector(b)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"dims differ: {a.size} vs {b.size}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ZeroNormError("cosine of a zero-norm vector is undefined")
    value = float(np.dot(a, b)) / (na * nb)
    return min(1.0, max(-1.0, value))


def cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine of two (n, d) arrays; rows where either norm is zero are NaN."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"shapes differ: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    denom = na * nb
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.einsum("...d,...d->...", a, b) / denom
    out = np.where(denom > 0.0, np.clip(out, -1.0, 1.0), np.nan)
    return out


def softmax_row(logits: Sequence[float] | np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.size == 0:
        raise ValueError("softmax_row needs a non-empty 1-D input")
    if not np.all(np.isfinite(logits)):
        raise ValueError("softmax_row needs finite logits")
    shifted = np.exp(logits - logits.max())
    return shifted / shifted.sum()


def masked_exp(logits: np.ndarray, allowed: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unnormalized masked softmax, computed in place on ``logits``.

    Returns ``(weights, denom)`` with ``weights / denom`` the softmax over the
    allowed slots. Disallowed slots hold exactly 0 since exp(-inf) == 0.
    """
    np.copyto(logits, -np.inf, where=~allowed)
    logits -= logits.max(axis=-1, keepdims=True)
    np.exp(logits, out=logits)
    return logits, logits.sum(axis=-1, keepdims=True)


def masked_softmax(logits: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    """Softmax over the last axis restricted to ``allowed``; disallowed slots get exactly 0.

    Every row must permit at least one slot.
    """
    weights, denom = masked_exp(np.array(logits, dtype=np.float64), np.broadcast_to(allowed, np.shape(logits)))
    weights /= denom
    return weights


def top_k_indices(scores: Sequence[float] | np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, returned in ascending index order.

    Equal scores prefer the lower index, so the result is fully determined
    by the input.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.size
    if k <= 0 or n == 0:
        return np.zeros(0, dtype=np.int64)
    if k >= n:
        return np.arange(n, dtype=np.int64)
    # stable sort on the negated score keeps lower indices first among ties
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:k]).astype(np.int64)
