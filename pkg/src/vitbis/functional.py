"""Neural-network primitives on :class:`~vitbis.tensor.Tensor`.

Convolutions go through an im2col unfold (see :mod:`vitbis._kernels`) and a
single matrix product. Bilinear resizing is a pair of dense interpolation
matrices applied along rows and columns, so its adjoint is exact.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import erf

from . import _kernels
from .errors import NonIntegralOutput, ShapeMismatch
from .tensor import Tensor, as_tensor, make_result

_SQRT_HALF = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward, "softmax")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the affine ``gamma, beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(f"layernorm params must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        dxhat = g * gamma.data
        dx = inv / d * (d * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result(out, (x, gamma, beta), backward, "layernorm")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT_HALF))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
    return make_result(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),), "gelu")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w (+ b)`` with ``w`` of shape ``[in, out]``."""
    y = x @ w
    return y if b is None else y + b


# -------------------------------------------------------------- convolution


def _conv_geometry(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0:
        raise ShapeMismatch(f"kernel {k} larger than padded extent {size + 2 * pad}")
    if span % stride:
        raise NonIntegralOutput(f"(size {size} + 2*{pad} - {k}) is not divisible by stride {stride}")
    return span // stride + 1


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int):
    b, _, h, wd = x.shape
    c_out, _, k, _ = w.shape
    oh = _conv_geometry(h, k, stride, pad)
    ow = _conv_geometry(wd, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _kernels.im2col(xp, k, stride, oh, ow)
    out = w.reshape(c_out, -1) @ cols
    return _from_channel_major(out, b, oh, ow), cols, xp.shape


def _to_channel_major(a: np.ndarray) -> np.ndarray:
    """``[B, C, H, W] -> [C, B*H*W]``."""
    return a.transpose(1, 0, 2, 3).reshape(a.shape[1], -1)


def _from_channel_major(a: np.ndarray, b: int, h: int, w: int) -> np.ndarray:
    return np.ascontiguousarray(a.reshape(-1, b, h, w).transpose(1, 0, 2, 3))


def _conv_input_grad(g: np.ndarray, w: np.ndarray, padded_shape, stride: int, pad: int) -> np.ndarray:
    _, c_out, oh, ow = g.shape
    k = w.shape[-1]
    dcols = w.reshape(c_out, -1).T @ _to_channel_major(g)
    dxp = _kernels.col2im(dcols, padded_shape, k, stride, oh, ow)
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(dxp)


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2D cross-correlation. ``x: [B, C_in, H, W]``, ``w: [C_out, C_in, k, k]``."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch("conv2d expects 4D input and weight")
    if x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeMismatch(f"conv2d input {x.shape} incompatible with weight {w.shape}")
    if bias is not None and bias.shape != (w.shape[0],):
        raise ShapeMismatch(f"conv2d bias must have shape ({w.shape[0]},)")
    out, cols, padded_shape = _conv_forward(x.data, w.data, stride, pad)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        dw = (_to_channel_major(g) @ cols.T).reshape(w.shape) if w.requires_grad else None
        dx = _conv_input_grad(g, w.data, padded_shape, stride, pad) if x.requires_grad else None
        grads = (dx, dw)
        if bias is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    parents = (x, w) if bias is None else (x, w, bias)
    return make_result(out, parents, backward, "conv2d")


def conv_transpose2d(
    x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 2, pad: int | None = None
) -> Tensor:
    """Transposed convolution, the adjoint of :func:`conv2d` with the same weight.

    ``w`` has shape ``[C_in, C_out, k, k]``; with ``k = 2 * stride`` and the
    default ``pad = stride // 2`` the output is exactly ``stride`` times larger.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch("conv_transpose2d expects 4D input and weight")
    if x.shape[1] != w.shape[0] or w.shape[2] != w.shape[3]:
        raise ShapeMismatch(f"conv_transpose2d input {x.shape} incompatible with weight {w.shape}")
    k = w.shape[-1]
    if pad is None:
        pad = stride // 2
    b, c_in, h, wd = x.shape
    c_out = w.shape[1]
    oh = (h - 1) * stride + k - 2 * pad
    ow = (wd - 1) * stride + k - 2 * pad
    if oh < 1 or ow < 1:
        raise ShapeMismatch("conv_transpose2d output would be empty")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeMismatch(f"conv_transpose2d bias must have shape ({c_out},)")
    padded_shape = (b, c_out, oh + 2 * pad, ow + 2 * pad)
    out = _conv_input_grad(x.data, w.data, padded_shape, stride, pad)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else g
        cols = _kernels.im2col(gp, k, stride, h, wd)
        dx = None
        if x.requires_grad:
            dx = _from_channel_major(w.data.reshape(c_in, -1) @ cols, b, h, wd)
        dw = (_to_channel_major(x.data) @ cols.T).reshape(w.shape) if w.requires_grad else None
        grads = (dx, dw)
        if bias is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    parents = (x, w) if bias is None else (x, w, bias)
    return make_result(out, parents, backward, "conv_transpose2d")


# ------------------------------------------------------------------ resizing


@lru_cache(maxsize=64)
def interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic ``[n_out, n_in]`` linear-interpolation matrix.

    Output sample ``i`` reads input coordinate ``(i + 0.5) * n_in / n_out - 0.5``
    (half-pixel centers), clamped to the valid range.
    """
    m = np.zeros((n_out, n_in))
    ratio = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * ratio - 0.5, 0.0), n_in - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    m.setflags(write=False)
    return m


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of ``[B, C, H, W]`` to ``[B, C, out_h, out_w]``."""
    if x.ndim != 4:
        raise ShapeMismatch("resize_bilinear expects a 4D tensor")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return x
    ry = interpolation_matrix(h, out_h)
    rx = interpolation_matrix(w, out_w)
    out = np.matmul(np.matmul(ry, x.data), rx.T)

    def backward(g):
        return (np.matmul(np.matmul(ry.T, g), rx),)

    return make_result(out, (x,), backward, "resize_bilinear")


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    if factor < 2:
        raise ShapeMismatch("upsample factor must be >= 2")
    return resize_bilinear(x, x.shape[2] * factor, x.shape[3] * factor)


__all__ = [
    "as_tensor",
    "bilinear_upsample",
    "conv2d",
    "conv_transpose2d",
    "gelu",
    "interpolation_matrix",
    "layernorm",
    "linear",
    "relu",
    "resize_bilinear",
    "softmax",
]
