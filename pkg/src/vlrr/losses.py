"""Reconstruction and classification losses.

Every loss returns ``(value, gradient)`` and averages over all elements (pixels
and batch for the reconstruction losses, batch for cross-entropy).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError

HUBER_C = 1.345
LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class HuberParams:
    c: float = HUBER_C

    def __post_init__(self):
        if not self.c > 0:
            raise ParameterError(f"Huber cutting edge c must be positive, got {self.c}")


def _same_shape(prediction, target, where):
    if prediction.shape != target.shape:
        raise DimensionError("shape", target.shape, prediction.shape, where)


def mse_loss(prediction: np.ndarray, target: np.ndarray):
    _same_shape(prediction, target, "mse_loss")
    r = prediction - target
    n = r.size
    return float(0.5 * np.sum(r * r) / n), r / n


def huber_elementwise(r: np.ndarray, c: float) -> np.ndarray:
    a = np.abs(r)
    return np.where(a < c, 0.5 * r * r, c * a - 0.5 * c * c)


def huber_loss(prediction: np.ndarray, target: np.ndarray, params: HuberParams | float = HUBER_C):
    """Mean Huber penalty: quadratic below ``c``, linear (slope ``c``) at and beyond it."""
    if not isinstance(params, HuberParams):
        params = HuberParams(float(params))
    _same_shape(prediction, target, "huber_loss")
    c = params.c
    r = prediction - target
    n = r.size
    value = float(np.sum(huber_elementwise(r, c)) / n)
    # the branch derivatives agree at |r| == c, so clipping covers both
    grad = np.clip(r, -c, c) / n
    return value, grad


def cross_entropy_loss(probabilities: np.ndarray, labels: np.ndarray):
    """Mean negative log-likelihood of ``labels``.

    The gradient is taken with respect to the logits that produced
    ``probabilities`` through softmax: ``(p - onehot) / batch``.
    """
    labels = np.asarray(labels)
    if probabilities.ndim != 2:
        raise DimensionError("rank", 2, probabilities.ndim, "cross_entropy_loss")
    b, k = probabilities.shape
    if labels.shape != (b,):
        raise DimensionError("batch", b, labels.shape, "cross_entropy_loss labels")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ParameterError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    rows = np.arange(b)
    p_true = np.maximum(probabilities[rows, labels], LOG_CLAMP)
    value = float(-np.sum(np.log(p_true)) / b)
    grad = probabilities.copy()
    grad[rows, labels] -= 1.0
    return value, grad / b
