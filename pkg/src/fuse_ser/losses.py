"""Training objectives: class-weighted cross-entropy, MSE and CCC loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .tensor import DimensionError, Tensor, as_tensor, log_softmax


class DegenerateStatisticsError(ValueError):
    """CCC/PCC undefined because the inputs carry no variance."""


@dataclass(frozen=True)
class ClassWeights:
    weights: tuple
    counts: tuple

    def as_array(self, dtype=np.float32) -> np.ndarray:
        return np.asarray(self.weights, dtype=dtype)


def class_weights(counts: Sequence[int] | Mapping[int, int]) -> ClassWeights:
    """Inverse-frequency weights ``w_c = N / (K * n_c)``.

    Uniform counts give unit weights, and ``sum_c n_c * w_c == N``.
    """
    if isinstance(counts, Mapping):
        counts = [counts[k] for k in sorted(counts)]
    counts = [int(c) for c in counts]
    for cls, n_c in enumerate(counts):
        if n_c < 1:
            raise ValueError(
                f"class {cls} has no samples; drop it from the task before weighting"
            )
    total, k = sum(counts), len(counts)
    return ClassWeights(tuple(total / (k * n_c) for n_c in counts), tuple(counts))


def weighted_cross_entropy(logits: Tensor, labels, weights=None, normalize: str = "batch") -> Tensor:
    """Mean over the batch of ``w[y] * -log softmax(logits)[y]``.

    ``normalize="weights"`` divides by the summed sample weights instead of
    the batch size.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if labels.shape[0] != n:
        raise DimensionError(f"{labels.shape[0]} labels for {n} rows", axis="N")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    if weights is None:
        w = np.ones(k)
    elif isinstance(weights, ClassWeights):
        w = weights.as_array(np.float64)
    else:
        w = np.asarray(weights, dtype=np.float64)
    if w.shape != (k,):
        raise DimensionError(f"{w.shape[0]} class weights for {k} classes", axis="K")
    sample_w = w[labels]
    picked = log_softmax(logits)[np.arange(n), labels]
    if normalize not in ("batch", "weights"):
        raise ValueError(f"normalize must be 'batch' or 'weights', got {normalize!r}")
    denom = n if normalize == "batch" else float(sample_w.sum())
    coef = (-sample_w / denom).astype(logits.dtype)
    return (picked * coef).sum()


def mse_loss(pred: Tensor, target) -> Tensor:
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        if pred.data.size == target.size and pred.data.size > 0:
            target = target.reshape(pred.shape)
        else:
            raise DimensionError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if pred.data.size == 0:
        raise ValueError("mse_loss needs at least one element")
    diff = pred - target
    return (diff * diff).mean()


def ccc(pred: Sequence[float], target: Sequence[float]) -> float:
    """Lin's concordance correlation with population (1/N) moments."""
    x = np.asarray(pred, dtype=np.float64).reshape(-1)
    y = np.asarray(target, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise DimensionError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("ccc needs at least two values")
    mx, my = x.mean(), y.mean()
    vx, vy = ((x - mx) ** 2).mean(), ((y - my) ** 2).mean()
    cov = ((x - mx) * (y - my)).mean()
    denom = vx + vy + (mx - my) ** 2
    if denom == 0.0:
        raise DegenerateStatisticsError("ccc undefined: both sequences constant with equal means")
    return float(2.0 * cov / denom)


def ccc_loss(pred: Tensor, target) -> Tensor:
    """``mean_d (1 - CCC_d)`` over the columns of ``[N, D]`` batches."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if pred.ndim == 1:
        pred = pred.reshape(pred.shape[0], 1)
    if target.ndim == 1:
        target = target.reshape(-1, 1)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction shape {pred.shape} != target shape {target.shape}")
    n = pred.shape[0]
    if n < 2:
        raise ValueError("ccc_loss needs a batch of at least two")
    mx = pred.mean(axis=0, keepdims=True)
    my = target.mean(axis=0, keepdims=True)
    dx = pred - mx
    dy = target - my
    vx = (dx * dx).mean(axis=0)
    vy = (dy * dy).mean(axis=0)
    cov = (dx * dy).mean(axis=0)
    gap = mx.reshape(-1) - my.reshape(-1)
    denom = vx + vy + gap * gap
    if np.any(denom.data == 0):
        raise DegenerateStatisticsError("ccc_loss undefined: a target column and its prediction are constant and equal")
    return (1.0 - 2.0 * cov / denom).mean()
