"""Forward and backward kernels for the layers used by local learning.

All kernels are pure functions over numpy arrays in NCHW layout. They
preserve the floating dtype of their inputs: training runs in float32,
gradient checks run the same code in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InputError, ShapeError

__all__ = [
    "conv2d_forward",
    "conv2d_backward",
    "conv_output_size",
    "pool_forward",
    "pool_backward",
    "PoolContext",
    "adaptive_avg_pool_forward",
    "adaptive_avg_pool_backward",
    "relu_forward",
    "relu_backward",
    "linear_forward",
    "linear_backward",
    "softmax_cross_entropy",
]


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _check_conv_args(x, weight, stride, padding):
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input has {x.shape[1]} channels, weight expects {weight.shape[1]}"
        )
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride={stride} / padding={padding}")
    kh, kw = weight.shape[2:]
    if kh > x.shape[2] + 2 * padding or kw > x.shape[3] + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {x.shape[2:]} (padding {padding})")


def _im2col(x, kh, kw, stride, padding):
    """Return patches as a (N*Ho*Wo, C*kh*kw) matrix plus (Ho, Wo)."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = windows.shape[:4]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def conv2d_forward(x, weight, bias, stride: int = 1, padding: int = 0):
    """Cross-correlation of ``x`` (N,Cin,H,W) with ``weight`` (Cout,Cin,kh,kw)."""
    _check_conv_args(x, weight, stride, padding)
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match {weight.shape[0]} output channels")
    cout, _, kh, kw = weight.shape
    cols, ho, wo = _im2col(x, kh, kw, stride, padding)
    out = cols @ weight.reshape(cout, -1).T
    out += bias
    return np.ascontiguousarray(out.reshape(x.shape[0], ho, wo, cout).transpose(0, 3, 1, 2))


def conv2d_backward(x, weight, grad_output, stride: int = 1, padding: int = 0, need_input_grad: bool = True):
    """Gradients of conv2d_forward w.r.t. input, weight and bias.

    Returns ``(grad_input, grad_weight, grad_bias)``; ``grad_input`` is None
    when ``need_input_grad`` is false (first layer of a local step).
    """
    _check_conv_args(x, weight, stride, padding)
    n, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if grad_output.shape != (n, cout, ho, wo):
        raise ShapeError(f"grad_output shape {grad_output.shape} != expected {(n, cout, ho, wo)}")

    cols, _, _ = _im2col(x, kh, kw, stride, padding)
    go = grad_output.transpose(0, 2, 3, 1).reshape(-1, cout)
    grad_weight = (go.T @ cols).reshape(weight.shape)
    grad_bias = go.sum(axis=0)
    if not need_input_grad:
        return None, grad_weight, grad_bias

    gcols = (go @ weight.reshape(cout, -1)).reshape(n, ho, wo, cin, kh, kw)
    hp, wp = h + 2 * padding, w + 2 * padding
    grad_padded = np.zeros((n, cin, hp, wp), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            grad_padded[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    grad_input = grad_padded[:, :, padding : padding + h, padding : padding + w]
    return np.ascontiguousarray(grad_input), grad_weight, grad_bias


@dataclass(frozen=True)
class PoolContext:
    """What pool_backward needs to route gradients."""

    kind: str
    input_shape: tuple
    kh: int
    kw: int
    stride: int
    argmax: np.ndarray | None = None  # flat window offset, max pooling only


def pool_forward(x, kind: str, kh: int, kw: int, stride: int):
    if kind not in ("max", "avg"):
        raise ValueError(f"unknown pooling kind {kind!r}")
    if x.ndim != 4:
        raise ShapeError(f"pooling expects 4-d input, got {x.shape}")
    if kh > x.shape[2] or kw > x.shape[3]:
        raise ShapeError(f"pooling window {kh}x{kw} larger than input {x.shape[2:]}")
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = windows.shape[:4]
    flat = windows.reshape(n, c, ho, wo, kh * kw)
    if kind == "max":
        argmax = flat.argmax(axis=-1).astype(np.int32)
        out = np.take_along_axis(flat, argmax[..., None].astype(np.intp), axis=-1)[..., 0]
        return np.ascontiguousarray(out), PoolContext("max", x.shape, kh, kw, stride, argmax)
    out = flat.mean(axis=-1, dtype=x.dtype)
    return np.ascontiguousarray(out), PoolContext("avg", x.shape, kh, kw, stride)


def pool_backward(ctx: PoolContext, grad_output):
    n, c, h, w = ctx.input_shape
    ho = (h - ctx.kh) // ctx.stride + 1
    wo = (w - ctx.kw) // ctx.stride + 1
    if grad_output.shape != (n, c, ho, wo):
        raise ShapeError(f"grad_output shape {grad_output.shape} does not match pooling output {(n, c, ho, wo)}")
    s = ctx.stride
    grad_input = np.zeros(ctx.input_shape, dtype=grad_output.dtype)
    scale = grad_output.dtype.type(1.0 / (ctx.kh * ctx.kw))
    for i in range(ctx.kh):
        for j in range(ctx.kw):
            view = grad_input[:, :, i : i + s * ho : s, j : j + s * wo : s]
            if ctx.kind == "max":
                view += np.where(ctx.argmax == i * ctx.kw + j, grad_output, 0)
            else:
                view += grad_output * scale
    return grad_input


def _adaptive_bins(size: int, out: int):
    return [((k * size) // out, -(-((k + 1) * size) // out)) for k in range(out)]


def adaptive_avg_pool_forward(x, out_hw: tuple[int, int]):
    """Average over ``out_hw`` adaptive bins (floor start, ceil end)."""
    if x.ndim != 4:
        raise ShapeError(f"adaptive pooling expects 4-d input, got {x.shape}")
    oh, ow = out_hw
    rows = _adaptive_bins(x.shape[2], oh)
    cols = _adaptive_bins(x.shape[3], ow)
    out = np.empty(x.shape[:2] + (oh, ow), dtype=x.dtype)
    for a, (r0, r1) in enumerate(rows):
        for b, (c0, c1) in enumerate(cols):
            out[:, :, a, b] = x[:, :, r0:r1, c0:c1].mean(axis=(2, 3), dtype=x.dtype)
    return out


def adaptive_avg_pool_backward(input_shape, grad_output):
    n, c, h, w = input_shape
    oh, ow = grad_output.shape[2:]
    if grad_output.shape[:2] != (n, c):
        raise ShapeError(f"grad_output shape {grad_output.shape} incompatible with input {input_shape}")
    grad_input = np.zeros(input_shape, dtype=grad_output.dtype)
    for a, (r0, r1) in enumerate(_adaptive_bins(h, oh)):
        for b, (c0, c1) in enumerate(_adaptive_bins(w, ow)):
            area = (r1 - r0) * (c1 - c0)
            grad_input[:, :, r0:r1, c0:c1] += (grad_output[:, :, a, b] / grad_output.dtype.type(area))[
                :, :, None, None
            ]
    return grad_input


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_output):
    # subgradient at exactly 0 is 0
    return np.where(x > 0, grad_output, 0).astype(grad_output.dtype, copy=False)


def linear_forward(x, weight, bias):
    """``x @ weight.T + bias`` for x (N,D), weight (K,D), bias (K,)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match weight {weight.shape}")
    out = x @ weight.T
    out += bias
    return out


def linear_backward(x, weight, grad_output, need_input_grad: bool = True):
    if grad_output.shape != (x.shape[0], weight.shape[0]):
        raise ShapeError(f"grad_output shape {grad_output.shape} != {(x.shape[0], weight.shape[0])}")
    grad_weight = grad_output.T @ x
    grad_bias = grad_output.sum(axis=0)
    grad_input = grad_output @ weight if need_input_grad else None
    return grad_input, grad_weight, grad_bias


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits.

    The reduction runs in float64; the gradient is returned in the dtype of
    ``logits``.
    """
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} are incompatible")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise InputError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    expz = np.exp(z)
    sums = expz.sum(axis=1)
    rows = np.arange(n)
    loss = float(np.mean(np.log(sums) - z[rows, labels]))
    grad = expz / sums[:, None]
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad.astype(logits.dtype)
