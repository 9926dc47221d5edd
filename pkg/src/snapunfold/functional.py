"""Differentiable network primitives on NCHW tensors."""

from __future__ import annotations

import contextlib
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from . import kernels
from .tensor import DimensionError, Tensor, make_node

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_mac_log: list | None = None


@contextlib.contextmanager
def count_macs():
    """Count multiply-accumulates of every convolution run inside the block.

    Yields a one-element list whose entry is updated in place.
    """
    global _mac_log
    prev = _mac_log
    _mac_log = [0]
    try:
        yield _mac_log
    finally:
        _mac_log = prev


def _log_macs(weight_size: int, batch: int, ho: int, wo: int) -> None:
    if _mac_log is not None:
        _mac_log[0] += weight_size * batch * ho * wo


def _pad_hw(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _out_size(n: int, k: int, stride: int, padding: int, op: str) -> int:
    span = n + 2 * padding - k
    if span < 0:
        raise DimensionError(op, f"kernel {k} larger than padded input {n + 2 * padding}")
    return span // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Dense 2-D cross-correlation, (b, cin, h, w) * (cout, cin, kh, kw)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError("conv2d", f"expected 4-D input and weight, got {x.shape} and {weight.shape}")
    b, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise DimensionError("conv2d", f"input has {cin} channels but weight expects {wcin}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError("conv2d", f"bias shape {bias.shape} != ({cout},)")
    if padding < 0 or stride < 1:
        raise DimensionError("conv2d", "padding must be >= 0 and stride >= 1")
    ho = _out_size(h, kh, stride, padding, "conv2d")
    wo = _out_size(w, kw, stride, padding, "conv2d")
    xd, wd = x.data, weight.data
    _log_macs(weight.size, b, ho, wo)

    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        w2 = wd.reshape(cout, cin)
        out = np.matmul(w2, xd.reshape(b, cin, h * w)).reshape(b, cout, h, w)

        def bw_input(g):
            g3 = g.reshape(b, cout, h * w)
            gx = np.matmul(w2.T, g3).reshape(x.shape) if x.requires_grad else None
            gw = np.einsum("bop,bcp->oc", g3, xd.reshape(b, cin, h * w)).reshape(weight.shape) if weight.requires_grad else None
            return gx, gw
    else:
        xp = _pad_hw(xd, padding)
        cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        out = np.tensordot(cols, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

        def bw_input(g):
            gx = gw = None
            if weight.requires_grad:
                gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
            if x.requires_grad:
                gcols = np.tensordot(g, wd, axes=([1], [0]))  # (b, ho, wo, cin, kh, kw)
                gxp = np.zeros(xp.shape, dtype=g.dtype)
                for p in range(kh):
                    for q in range(kw):
                        gxp[:, :, p:p + stride * (ho - 1) + 1:stride, q:q + stride * (wo - 1) + 1:stride] += (
                            gcols[:, :, :, :, p, q].transpose(0, 3, 1, 2)
                        )
                gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
            return gx, gw

    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx, gw = bw_input(g)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_node(out, parents, bw, "conv2d")


def dwconv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Depthwise convolution: one (kh, kw) filter per channel, weight (c, 1, kh, kw)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError("dwconv2d", f"expected 4-D input and weight, got {x.shape} and {weight.shape}")
    b, c, h, w = x.shape
    if weight.shape[0] != c or weight.shape[1] != 1:
        raise DimensionError("dwconv2d", f"weight {weight.shape} does not match {c} input channels")
    if bias is not None and bias.shape != (c,):
        raise DimensionError("dwconv2d", f"bias shape {bias.shape} != ({c},)")
    kh, kw = weight.shape[2], weight.shape[3]
    ho = _out_size(h, kh, stride, padding, "dwconv2d")
    wo = _out_size(w, kw, stride, padding, "dwconv2d")
    _log_macs(weight.size, b, ho, wo)
    xp = np.ascontiguousarray(_pad_hw(x.data, padding))
    k3 = np.ascontiguousarray(weight.data.reshape(c, kh, kw), dtype=xp.dtype)
    out = kernels.dw_forward(xp, k3, stride)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g = np.ascontiguousarray(g, dtype=xp.dtype)
        gx = gw = None
        if x.requires_grad:
            gxp = kernels.dw_backward_input(g, k3, stride, xp.shape[2], xp.shape[3])
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if weight.requires_grad:
            gw = kernels.dw_backward_weight(xp, g, kh, kw, stride).reshape(weight.shape)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_node(out, parents, bw, "dwconv2d")


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the channel axis at each spatial location."""
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    c = x.shape[1]
    if gain.shape != (c,) or shift.shape != (c,):
        raise DimensionError("layer_norm", f"gain/shift must have shape ({c},)")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gain.data[None, :, None, None]
    out = xhat * gd + shift.data[None, :, None, None]

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = rstd * (gh - gh.mean(axis=1, keepdims=True) - xhat * (gh * xhat).mean(axis=1, keepdims=True))
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gain.requires_grad else None
        gs = g.sum(axis=(0, 2, 3)) if shift.requires_grad else None
        return gx, gg, gs

    return make_node(out, (x, gain, shift), bw, "layer_norm")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x) with the standard normal CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + special.erf(xd / _SQRT2))
    out = xd * cdf

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return make_node(out, (x,), bw, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    s = special.expit(x.data)
    return make_node(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    out = np.logaddexp(xd.dtype.type(0), xd)
    return make_node(out, (x,), lambda g: (g * special.expit(xd),), "softplus")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def avgpool2(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError("avgpool2", f"spatial size {h}x{w} must be even")
    out = x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return make_node(out, (x,), bw, "avgpool2")


def upsample2(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bw(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_node(out, (x,), bw, "upsample2")


def resample(x: Tensor, mode: str) -> Tensor:
    """Change spatial scale by ``"avgpool2"`` or ``"nearest_up2"``."""
    if mode == "avgpool2":
        return avgpool2(x)
    if mode == "nearest_up2":
        return upsample2(x)
    raise ValueError(f"unknown resample mode {mode!r}")
