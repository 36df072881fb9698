"""Multinomial logistic regression with minibatch SGD.

Parameters are a dense (num_classes, dim + 1) matrix whose last column is
the bias. Feature matrices may be passed raw (dim columns) or already
augmented with a ones column; the functions tell them apart by width.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np


@lru_cache(maxsize=64)
def _rows(n: int) -> np.ndarray:
    return np.arange(n)


def init_params(num_classes: int, dim: int) -> np.ndarray:
    """All-zero parameters: the uniform-prediction starting point."""
    return np.zeros((num_classes, dim + 1))


def augment(x: np.ndarray) -> np.ndarray:
    """Append the bias ones column."""
    return np.hstack([x, np.ones((x.shape[0], 1))])


def _augmented(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    if x.shape[1] == w.shape[1]:
        return x
    if x.shape[1] == w.shape[1] - 1:
        return augment(x)
    raise ValueError(
        f"feature width {x.shape[1]} incompatible with parameters {w.shape}"
    )


def loss(
    w: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    l2: float = 0.0,
    sample_weight: np.ndarray | None = None,
) -> float:
    """Mean softmax cross-entropy, log-sum-exp stabilized.

    ``sample_weight`` replaces the uniform mean with a weighted sum (the
    weights are expected to sum to one).
    """
    if len(y) == 0:
        raise ValueError("loss requires at least one sample")
    xa = _augmented(x, w)
    logits = xa @ w.T
    m = logits.max(axis=1)
    lse = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
    per_sample = lse - logits[_rows(len(y)), y]
    value = (
        float(per_sample.mean())
        if sample_weight is None
        else float(per_sample @ sample_weight)
    )
    if l2:
        value += 0.5 * l2 * float((w[:, :-1] ** 2).sum())
    return value


def gradient(w: np.ndarray, x: np.ndarray, y: np.ndarray, l2: float = 0.0) -> np.ndarray:
    """Mean gradient of :func:`loss` over the batch; same shape as ``w``."""
    if len(y) == 0:
        raise ValueError("gradient requires at least one sample")
    xa = _augmented(x, w)
    logits = xa @ w.T
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    p[_rows(len(y)), y] -= 1.0
    g = p.T @ xa / len(y)
    if l2:
        g[:, :-1] += l2 * w[:, :-1]
    return g


def predict(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.argmax(_augmented(x, w) @ w.T, axis=1)


def accuracy(w: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return float("nan")
    return float((predict(w, x) == y).mean())


def local_update(
    w: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    steps: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
    l2: float = 0.0,
) -> tuple[np.ndarray, float]:
    """Run ``steps`` SGD steps at a fixed learning rate on one shard.

    Minibatches are drawn without replacement per step, or with
    replacement when the shard is smaller than ``batch_size``. Returns the
    updated parameters and the maximum gradient L2 norm observed across
    the steps (the shard's contribution to its running norm bound).
    """
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    if steps == 0:
        return w.copy(), 0.0
    if lr <= 0.0:
        raise ValueError(f"lr must be > 0, got {lr}")
    n = len(y)
    with_replacement = n < batch_size
    xa = _augmented(x, w)
    w = w.copy()
    max_norm = 0.0
    for _ in range(steps):
        if with_replacement:
            idx = np.sort(rng.integers(0, n, size=batch_size))
        else:
            idx = np.sort(rng.permutation(n)[:batch_size])
        g = gradient(w, xa[idx], y[idx], l2)
        flat = g.ravel()
        max_norm = max(max_norm, math.sqrt(float(flat @ flat)))
        w -= lr * g
    return w, max_norm
