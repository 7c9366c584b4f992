"""Small dense-matrix and activation kernel shared by the rest of the package.

Matrices and vectors are plain float64 numpy arrays. Random streams come from
numpy's Philox generator (a counter-based bit generator), keyed through a
``SeedSequence`` so that every ``(seed, *stream)`` tuple names one reproducible
stream.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "as_matrix",
    "as_vector",
    "inf_norm_matrix",
    "inf_norm_concat",
    "inf_norm_vector",
    "sigmoid",
    "sigmoid_prime",
    "tanh_act",
    "make_rng",
]


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    m = np.array(a, dtype=np.float64, copy=True)
    if m.ndim == 1 and m.size == 0:
        m = m.reshape(0, 0)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} has non-finite entries")
    return m


def as_vector(a, name: str = "vector") -> np.ndarray:
    v = np.array(a, dtype=np.float64, copy=True)
    if v.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} has non-finite entries")
    return v


def inf_norm_matrix(m) -> float:
    """Induced infinity norm: the largest absolute row sum."""
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0:
        return 0.0
    return float(np.abs(m).sum(axis=1).max())


def inf_norm_concat(blocks: Sequence) -> float:
    """Infinity norm of the horizontal concatenation ``[B1 B2 ... Bn]``.

    1-D blocks (bias vectors) are treated as single columns.
    """
    cols = []
    rows = None
    for b in blocks:
        b = np.asarray(b, dtype=np.float64)
        if b.ndim == 1:
            b = b[:, None]
        if rows is None:
            rows = b.shape[0]
        elif b.shape[0] != rows:
            raise ValueError(f"row count mismatch: {b.shape[0]} != {rows}")
        cols.append(b)
    if not cols:
        return 0.0
    return inf_norm_matrix(np.hstack(cols))


def inf_norm_vector(v) -> float:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        return 0.0
    return float(np.abs(v).max())


def sigmoid(x):
    """Logistic function, overflow-free for any finite argument."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    d = 1.0 + e
    # x >= 0: 1 / (1 + e^-x);  x < 0: e^x / (1 + e^x)
    out = np.where(x >= 0, 1.0 / d, e / d)
    if out.ndim == 0:
        return float(out)
    return out


def sigmoid_prime(x):
    s = sigmoid(x)
    return s * (1.0 - s)


def tanh_act(x):
    out = np.tanh(np.asarray(x, dtype=np.float64))
    if out.ndim == 0:
        return float(out)
    return out


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Philox-backed generator for ``seed`` and an optional stream path.

    Distinct stream paths give statistically independent generators, which is
    how per-experiment and per-worker streams are split off a run seed.
    """
    words: Iterable[int] = (int(seed), *(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(words))))
