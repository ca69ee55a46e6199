"""
FlowAug - Differentiable Operations
Composite and primitive operations recorded on the tensor tape

Features:
- conv2d with same padding for 1x1 and 3x3 kernels (im2col via sliding windows)
- layer_norm over the channel axis
- softmax / log_softmax and multi-head scaled dot-product self-attention
- matmul, concat, slogdet, average pooling, Gaussian log-density, cross-entropy
"""

import logging
import math
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from engine.errors import ShapeError
from engine.tensor import Tensor, _unbroadcast, as_tensor

logger = logging.getLogger(__name__)

SUPPORTED_KERNELS = (1, 3)
LAYER_NORM_EPS = 1e-5
LOG_2PI = math.log(2.0 * math.pi)


def _swap_last(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes with leading-axis broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    a_data, b_data = a.data, b.data

    def backward(g):
        grad_a = _unbroadcast(g @ _swap_last(b_data), a_data.shape)
        grad_b = _unbroadcast(_swap_last(a_data) @ g, b_data.shape)
        return grad_a, grad_b

    return Tensor.make(a_data @ b_data, (a, b), backward, "matmul")


def _conv_raw(x: np.ndarray, filters: np.ndarray, pad_h: int, pad_w: int) -> Tuple[np.ndarray, np.ndarray]:
    kh, kw = filters.shape[:2]
    padded = np.pad(x, ((0, 0), (pad_h, pad_h), (pad_w, pad_w), (0, 0)))
    # (B, H, W, Cin, kh, kw)
    windows = sliding_window_view(padded, (kh, kw), axis=(1, 2))
    out = np.tensordot(windows, filters, axes=([3, 4, 5], [2, 0, 1]))
    return out, windows


def conv2d(x, filters, bias=None, same_padding: bool = True) -> Tensor:
    """
    2-D convolution with stride 1

    Args:
        x: input of shape (B, H, W, Cin)
        filters: kernel of shape (Kh, Kw, Cin, Cout), Kh and Kw in {1, 3}
        bias: optional per-output-channel bias of shape (Cout,)
        same_padding: zero-pad so that output spatial dims equal input dims

    Returns:
        Tensor of shape (B, H', W', Cout)
    """
    x, filters = as_tensor(x), as_tensor(filters)
    if x.ndim != 4 or filters.ndim != 4:
        raise ShapeError(f"conv2d expects BHWC input and KhKwCinCout filters, got {x.shape} and {filters.shape}")
    kh, kw, cin, cout = filters.shape
    if kh not in SUPPORTED_KERNELS or kw not in SUPPORTED_KERNELS:
        raise ShapeError(f"conv2d supports kernels {SUPPORTED_KERNELS}, got filters {filters.shape}")
    if x.shape[3] != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs filters {filters.shape}")

    pad_h, pad_w = (kh // 2, kw // 2) if same_padding else (0, 0)
    f_data = filters.data
    out, windows = _conv_raw(x.data, f_data, pad_h, pad_w)
    flipped = np.ascontiguousarray(f_data[::-1, ::-1].transpose(0, 1, 3, 2))

    def backward(g):
        grad_filters = np.tensordot(windows, g, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
        grad_x, _ = _conv_raw(g, flipped, kh - 1 - pad_h, kw - 1 - pad_w)
        return grad_x, grad_filters

    result = Tensor.make(out, (x, filters), backward, "conv2d")
    if bias is not None:
        result = result + bias
    return result


def layer_norm(x, gain, bias, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last (channel) axis, then apply gain and bias."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(f"layer_norm needs a non-empty channel axis, got shape {x.shape}")
    centered = x - x.mean(axis=-1, keepdims=True)
    variance = (centered * centered).mean(axis=-1, keepdims=True)
    normalized = centered / (variance + eps) ** 0.5
    return normalized * gain + bias


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor.make(out, (x,), backward, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - log_norm
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return Tensor.make(out, (x,), backward, "log_softmax")


def multi_head_self_attention(
    x,
    heads: int,
    w_query,
    w_key,
    w_value,
    w_output,
    return_weights: bool = False,
) -> Union[Tensor, Tuple[Tensor, Tensor]]:
    """
    Scaled dot-product self-attention with `heads` heads

    Positions are the T axis as given; no positional encoding is added.

    Args:
        x: input of shape (B, T, D)
        heads: number of heads, must divide D
        w_query, w_key, w_value, w_output: D x D projection matrices
        return_weights: also return the (B, heads, T, T) attention matrices

    Returns:
        Output of shape (B, T, D), optionally with the attention weights
    """
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"attention expects (B, T, D) input, got {x.shape}")
    batch, length, width = x.shape
    if heads <= 0 or width % heads != 0:
        raise ShapeError(f"attention width {width} is not divisible by heads={heads}")
    for name, w in (("query", w_query), ("key", w_key), ("value", w_value), ("output", w_output)):
        if tuple(w.shape) != (width, width):
            raise ShapeError(f"{name} projection must be ({width}, {width}), got {tuple(w.shape)}")
    head_dim = width // heads

    def split(t: Tensor) -> Tensor:
        return t.reshape(batch, length, heads, head_dim).transpose(0, 2, 1, 3)

    q = split(matmul(x, w_query))
    k = split(matmul(x, w_key))
    v = split(matmul(x, w_value))
    scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(head_dim))
    weights = softmax(scores, axis=-1)
    mixed = matmul(weights, v).transpose(0, 2, 1, 3).reshape(batch, length, width)
    out = matmul(mixed, w_output)
    if return_weights:
        return out, weights
    return out


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    axis = axis % ndim
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor.make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def slogdet(w) -> Tensor:
    """log|det W| for a square matrix, with gradient inv(W)^T."""
    w = as_tensor(w)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ShapeError(f"slogdet needs a square matrix, got {w.shape}")
    _, logabs = np.linalg.slogdet(w.data)
    w_data = w.data

    def backward(g):
        return (g * np.linalg.inv(w_data).T,)

    return Tensor.make(np.asarray(logabs), (w,), backward, "slogdet")


def avg_pool2(x) -> Tensor:
    """2x2 average pooling with stride 2 over BHWC input."""
    x = as_tensor(x)
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial dims, got {x.shape}")
    return x.reshape(b, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))


def standard_normal_log_prob(z) -> Tensor:
    """Per-item log-density of z under N(0, I), summed over all non-batch axes."""
    z = as_tensor(z)
    axes = tuple(range(1, z.ndim))
    return ((z * z) * -0.5 - 0.5 * LOG_2PI).sum(axis=axes)


def cross_entropy(logits, labels: np.ndarray, weights: Optional[np.ndarray] = None) -> Tensor:
    """Mean negative log-likelihood of integer `labels` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy needs (N, K) logits and (N,) labels, got {logits.shape} and {labels.shape}")
    picked = log_softmax(logits, axis=-1)[np.arange(labels.shape[0]), labels]
    if weights is None:
        return -picked.mean()
    weights = np.asarray(weights, dtype=np.float64)
    return -(picked * weights).sum() / float(weights.sum())

