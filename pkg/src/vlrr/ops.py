"""Forward/backward kernels and the SGD update.

Tensors are float64 numpy arrays: images and feature maps are (batch,
channels, height, width), fully connected activations are (batch, features).
All convolutions use stride 1 and zero "same" padding, so the filter size must
be odd.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Mapping, MutableMapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, ParameterError

DTYPE = np.float64


def thread_limit() -> int:
    """Thread cap for BLAS, from ``VLRR_THREADS`` (default 1)."""
    raw = os.environ.get("VLRR_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ParameterError(f"VLRR_THREADS must be an integer, got {raw!r}") from None
    return max(n, 1)


def limit_threads():
    """Context manager pinning BLAS to ``thread_limit()`` threads.

    A fixed thread count fixes the reduction order inside matrix products, which
    the bit-for-bit determinism guarantees rely on.
    """
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=thread_limit())


@dataclass
class ConvParams:
    weights: np.ndarray  # (out, in, f, f)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        w, b = self.weights, self.bias
        if w.ndim != 4:
            raise DimensionError("rank", 4, w.ndim, "conv weights")
        if w.shape[2] != w.shape[3]:
            raise DimensionError("filter width", w.shape[2], w.shape[3], "conv weights")
        if w.shape[2] % 2 != 1:
            raise ParameterError(f"filter size must be odd, got {w.shape[2]}")
        if b.shape != (w.shape[0],):
            raise DimensionError("out_channels", w.shape[0], b.shape, "conv bias")

    @property
    def filter_size(self) -> int:
        return self.weights.shape[2]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    stride = 1


@dataclass
class FcParams:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        if self.weights.ndim != 2:
            raise DimensionError("rank", 2, self.weights.ndim, "fc weights")
        if self.bias.shape != (self.weights.shape[0],):
            raise DimensionError("out_features", self.weights.shape[0], self.bias.shape, "fc bias")


def _check_conv_input(x: np.ndarray, params: ConvParams, where: str):
    if x.ndim != 4:
        raise DimensionError("rank", 4, x.ndim, where)
    if x.shape[1] != params.in_channels:
        raise DimensionError("channels", params.in_channels, x.shape[1], where)
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise DimensionError("spatial", ">= 1", x.shape[2:], where)


# upper bound on the im2col buffer; larger batches are processed in chunks
COLS_BYTES = 64 * 2**20


def _chunks(x: np.ndarray, f: int):
    B, C, H, W = x.shape
    per_sample = C * f * f * H * W * 8
    step = max(1, COLS_BYTES // max(per_sample, 1))
    for start in range(0, B, step):
        yield slice(start, min(B, start + step))


def _im2col(x: np.ndarray, f: int) -> np.ndarray:
    """(B, C, H, W) -> (C*f*f, B*H*W) columns of zero-padded f x f patches."""
    B, C, H, W = x.shape
    p = (f - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    win = sliding_window_view(xp, (f, f), axis=(2, 3))  # (B, C, H, W, f, f)
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(C * f * f, B * H * W)


def _col2im(cols: np.ndarray, shape, f: int) -> np.ndarray:
    B, C, H, W = shape
    p = (f - 1) // 2
    cols = cols.reshape(C, f, f, B, H, W)
    out = np.zeros((C, B, H + 2 * p, W + 2 * p), dtype=DTYPE)
    for i in range(f):
        for j in range(f):
            out[:, :, i : i + H, j : j + W] += cols[:, i, j]
    return out[:, :, p : p + H, p : p + W].transpose(1, 0, 2, 3)


def conv2d_forward(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Same-padded stride-1 cross-correlation plus bias (im2col + one matmul)."""
    _check_conv_input(x, params, "conv2d_forward")
    w = params.weights
    O, f = w.shape[0], w.shape[2]
    B, _, H, W = x.shape
    wm = w.reshape(O, -1)
    out = np.empty((B, O, H, W), dtype=DTYPE)
    for sl in _chunks(x, f):
        xs = x[sl]
        y = wm @ _im2col(xs, f)
        out[sl] = y.reshape(O, xs.shape[0], H, W).transpose(1, 0, 2, 3)
    out += params.bias[None, :, None, None]
    return out


def conv2d_backward(x: np.ndarray, params: ConvParams, grad_out: np.ndarray, input_grad: bool = True):
    """Gradients of ``sum(grad_out * conv2d_forward(x, params))``.

    Returns ``(grad_input, grad_weights, grad_bias)``; ``grad_input`` is None
    when ``input_grad`` is false.
    """
    _check_conv_input(x, params, "conv2d_backward")
    w = params.weights
    O, C, f = w.shape[0], w.shape[1], w.shape[2]
    B, _, H, W = x.shape
    expected = (B, O, H, W)
    if grad_out.ndim != 4:
        raise DimensionError("rank", 4, grad_out.ndim, "conv2d_backward grad_out")
    for axis, want, got in zip(("batch", "channels", "height", "width"), expected, grad_out.shape):
        if want != got:
            raise DimensionError(axis, want, got, "conv2d_backward grad_out")
    wm = w.reshape(O, -1)
    grad_wm = np.zeros_like(wm)
    # with O <= C the input gradient is cheaper as a correlation of grad_out
    # with the flipped, transposed bank (exact for odd f and same padding)
    via_flip = input_grad and O <= C
    grad_x = np.empty_like(x, dtype=DTYPE) if input_grad and not via_flip else None
    for sl in _chunks(x, f):
        xs = x[sl]
        gm = grad_out[sl].transpose(1, 0, 2, 3).reshape(O, -1)
        grad_wm += gm @ _im2col(xs, f).T
        if grad_x is not None:
            grad_x[sl] = _col2im(wm.T @ gm, xs.shape, f)
    if via_flip:
        flipped = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        grad_x = conv2d_forward(grad_out, ConvParams(flipped, np.zeros(C)))
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return grad_x, grad_wm.reshape(w.shape), grad_b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # subgradient 0 at x == 0
    return np.where(x > 0, grad_out, 0.0)


def fc_forward(x: np.ndarray, params: FcParams) -> np.ndarray:
    if x.ndim != 2:
        raise DimensionError("rank", 2, x.ndim, "fc_forward")
    if x.shape[1] != params.weights.shape[1]:
        raise DimensionError("features", params.weights.shape[1], x.shape[1], "fc_forward")
    return x @ params.weights.T + params.bias


def fc_backward(x: np.ndarray, params: FcParams, grad_out: np.ndarray):
    """Returns ``(grad_input, grad_weights, grad_bias)``."""
    if grad_out.shape != (x.shape[0], params.weights.shape[0]):
        raise DimensionError(
            "out_features", (x.shape[0], params.weights.shape[0]), grad_out.shape, "fc_backward"
        )
    return grad_out @ params.weights, grad_out.T @ x, grad_out.sum(axis=0)


def softmax(logits: np.ndarray) -> np.ndarray:
    if logits.ndim != 2:
        raise DimensionError("rank", 2, logits.ndim, "softmax")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def dropout(x: np.ndarray, rate: float, rng: np.random.Generator | None, training: bool):
    """Inverted dropout. Returns ``(output, mask)``; ``mask`` is None when inactive."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    keep = rng.random(x.shape) >= rate
    mask = keep / (1.0 - rate)
    return x * mask, mask


def dropout_backward(grad_out: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    return grad_out if mask is None else grad_out * mask


def sgd_step(
    params: MutableMapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    learning_rate: float,
    names=None,
) -> None:
    """In-place ``w <- w - lr * g`` for every name in ``names`` (default: all grads)."""
    for name in grads if names is None else names:
        w, g = params[name], grads[name]
        if w.shape != g.shape:
            raise DimensionError("shape", w.shape, g.shape, f"sgd_step[{name}]")
        w -= learning_rate * g
