"""Dense float64 numerics and seeded random streams.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 in C (row-major)
order. Random streams are PCG64 generators seeded through ``SeedSequence``
with an explicit ``(seed, stream)`` entropy pair, so every module draws from
its own reproducible sub-stream.
"""
from __future__ import annotations

import enum

import numpy as np


class Stream(enum.IntEnum):
    """Named random sub-streams. Values are part of the on-disk reproducibility contract."""

    DATA = 0
    INIT = 1
    AUGMENT = 2
    LOADER = 3
    SPLIT = 4
    TEACHER = 5
    SHIFT = 6


def make_rng(seed: int, stream: int = 0, *keys: int) -> np.random.Generator:
    """PCG64 generator for sub-stream ``stream`` of ``seed``.

    Extra integer ``keys`` derive further independent streams (e.g. one per
    dataset draw) without consuming the parent stream.
    """
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    entropy = [int(seed), int(stream), *(int(k) for k in keys)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def as_matrix(x, cols: int | None = None) -> np.ndarray:
    m = np.ascontiguousarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {m.shape}")
    if cols is not None and m.shape[1] != cols:
        raise ValueError(f"expected {cols} columns, got {m.shape[1]}")
    return m


def softmax_rows(logits) -> np.ndarray:
    """Row-wise softmax with max subtraction.

    Accepts a vector (treated as one row, result returned as a vector) or a
    matrix. Raises ``ValueError("non-finite logits")`` on nan/inf input.
    """
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite logits")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite logits")
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def argmax_rows(m) -> np.ndarray:
    """Index of the row maximum; ties go to the smallest index."""
    a = np.asarray(m)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.shape[-1] == 0:
        raise ValueError("argmax of an empty row")
    # np.argmax returns the first occurrence, which is the tie-break we want
    return np.argmax(a, axis=-1)


def gaussian_sample(rng: np.random.Generator, mean, scale: float) -> np.ndarray:
    """Draw ``mean + scale * N(0, I)``. ``scale == 0`` returns ``mean`` exactly."""
    if scale < 0:
        raise ValueError(f"scale must be non-negative, got {scale}")
    mu = np.asarray(mean, dtype=np.float64)
    if scale == 0:
        return mu.copy()
    return mu + scale * rng.standard_normal(mu.shape)


def one_hot(labels, num_classes: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    out = np.zeros((y.shape[0], num_classes))
    out[np.arange(y.shape[0]), y] = 1.0
    return out


def cross_entropy_rows(logits, labels) -> tuple[np.ndarray, np.ndarray]:
    """Per-row cross-entropy and its gradient with respect to the logits."""
    z = as_matrix(logits)
    y = np.asarray(labels, dtype=np.int64)
    logp = log_softmax_rows(z)
    rows = np.arange(z.shape[0])
    losses = -logp[rows, y]
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    return losses, grad


def check_finite(x, what: str = "values") -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite {what}")
