"""Neural-network primitives on top of :mod:`east.tensor.core`."""

from __future__ import annotations

import math

import numpy as np

from .core import Tensor, _result, matmul, transpose


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
               axis: int = -1, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=axis, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=axis, keepdims=True)
        gx = g * xhat
        return (inv * (g - gm - xhat * gx.mean(axis=axis, keepdims=True)),)

    out = _result(xhat.astype(xd.dtype, copy=False), (x,), backward, "layer_norm")
    if weight is not None:
        out = out * weight
    if bias is not None:
        out = out + bias
    return out


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention over the second-to-last axis.

    q: [..., Tq, d], k: [..., Tk, d], v: [..., Tk, dv] -> [..., Tq, dv].
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    scores = matmul(q, transpose(k, _swap_last(k.ndim))) * (1.0 / math.sqrt(q.shape[-1]))
    return matmul(softmax(scores, axis=-1), v)


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


# -- temporal convolutions ----------------------------------------------------

def _padding(k: int, dilation: int, padding: str) -> tuple[int, int]:
    total = dilation * (k - 1)
    if padding == "same":
        if k % 2 == 0:
            raise ValueError(f"same padding needs an odd kernel size, got {k}")
        return total // 2, total - total // 2
    if padding == "causal":
        return total, 0
    raise ValueError(f"unknown padding mode {padding!r}")


def _unfold(xp: np.ndarray, k: int, dilation: int, stride: int, t_out: int) -> np.ndarray:
    span = stride * (t_out - 1) + 1
    return np.stack([xp[..., j * dilation: j * dilation + span: stride] for j in range(k)], axis=-2)


def _fold(cols: np.ndarray, padded_len: int, k: int, dilation: int, stride: int) -> np.ndarray:
    t_out = cols.shape[-1]
    span = stride * (t_out - 1) + 1
    out = np.zeros(cols.shape[:-2] + (padded_len,), dtype=cols.dtype)
    for j in range(k):
        out[..., j * dilation: j * dilation + span: stride] += cols[..., j, :]
    return out


def _check_conv_args(stride: int, dilation: int) -> None:
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")


def dwconv1d(x: Tensor, kernel: Tensor, stride: int = 1, dilation: int = 1,
             padding: str = "same") -> Tensor:
    """Depthwise temporal convolution. x: [B, C, T], kernel: [C, k].

    Zero padding; output length is ceil(T / stride).
    """
    _check_conv_args(stride, dilation)
    if x.ndim != 3 or kernel.ndim != 2 or kernel.shape[0] != x.shape[1]:
        raise ValueError(f"dwconv1d shape mismatch: x {x.shape}, kernel {kernel.shape}")
    c, k = kernel.shape
    t = x.shape[2]
    left, right = _padding(k, dilation, padding)
    t_out = -(-t // stride)
    xp = np.pad(x.data, ((0, 0), (0, 0), (left, right)))
    cols = _unfold(xp, k, dilation, stride, t_out)  # [B, C, k, T']
    w = kernel.data
    out = np.einsum("bckt,ck->bct", cols, w)

    def backward(g):
        gw = np.einsum("bct,bckt->ck", g, cols)
        gcols = g[:, :, None, :] * w[None, :, :, None]
        gxp = _fold(gcols, xp.shape[-1], k, dilation, stride)
        return gxp[..., left: left + t], gw

    return _result(out, (x, kernel), backward, "dwconv1d")


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, dilation: int = 1,
           stride: int = 1, padding: str = "same") -> Tensor:
    """Full temporal convolution. x: [B, Cin, T], kernel: [Cout, Cin, k]."""
    _check_conv_args(stride, dilation)
    if x.ndim != 3 or kernel.ndim != 3 or kernel.shape[1] != x.shape[1]:
        raise ValueError(f"conv1d shape mismatch: x {x.shape}, kernel {kernel.shape}")
    cout, cin, k = kernel.shape
    b, _, t = x.shape
    w2 = kernel.data.reshape(cout, cin * k)
    if k == 1 and stride == 1:
        cols = x.data
        xp_len, left = t, 0
    else:
        left, right = _padding(k, dilation, padding)
        xp = np.pad(x.data, ((0, 0), (0, 0), (left, right)))
        xp_len = xp.shape[-1]
        t_out = -(-t // stride)
        cols = _unfold(xp, k, dilation, stride, t_out).reshape(b, cin * k, t_out)
    out = np.matmul(w2, cols)
    if bias is not None:
        out = out + bias.data[:, None]
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        gw = np.matmul(g, np.swapaxes(cols, 1, 2)).sum(axis=0).reshape(cout, cin, k)
        gcols = np.matmul(w2.T, g)
        if k == 1 and stride == 1:
            gx = gcols
        else:
            gxp = _fold(gcols.reshape(b, cin, k, -1), xp_len, k, dilation, stride)
            gx = gxp[..., left: left + t]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return grads

    return _result(out, parents, backward, "conv1d")
