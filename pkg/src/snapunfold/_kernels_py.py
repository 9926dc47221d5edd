"""Pure-numpy versions of the hot kernels.

Signatures match the compiled module ``snapunfold._kernels`` one for one so
``snapunfold.kernels`` can pick either at import time.
"""

import numpy as np


def dw_forward(xpad, w, stride):
    """Depthwise correlation of an already padded batch.

    xpad : (b, c, H, W); w : (c, kh, kw). Returns (b, c, ho, wo).
    """
    b, c, H, W = xpad.shape
    _, kh, kw = w.shape
    ho = (H - kh) // stride + 1
    wo = (W - kw) // stride + 1
    out = np.zeros((b, c, ho, wo), dtype=xpad.dtype)
    for p in range(kh):
        for q in range(kw):
            win = xpad[:, :, p:p + stride * (ho - 1) + 1:stride, q:q + stride * (wo - 1) + 1:stride]
            out += win * w[None, :, p, q, None, None]
    return out


def dw_backward_input(g, w, stride, H, W):
    """Gradient w.r.t. the padded input of :func:`dw_forward`."""
    b, c, ho, wo = g.shape
    _, kh, kw = w.shape
    gx = np.zeros((b, c, H, W), dtype=g.dtype)
    for p in range(kh):
        for q in range(kw):
            gx[:, :, p:p + stride * (ho - 1) + 1:stride, q:q + stride * (wo - 1) + 1:stride] += (
                g * w[None, :, p, q, None, None]
            )
    return gx


def dw_backward_weight(xpad, g, kh, kw, stride):
    """Gradient w.r.t. the (c, kh, kw) depthwise kernel."""
    b, c, ho, wo = g.shape
    gw = np.empty((c, kh, kw), dtype=g.dtype)
    for p in range(kh):
        for q in range(kw):
            win = xpad[:, :, p:p + stride * (ho - 1) + 1:stride, q:q + stride * (wo - 1) + 1:stride]
            gw[:, p, q] = np.einsum("bchw,bchw->c", win, g)
    return gw


def _grad(u):
    gx = np.zeros_like(u)
    gy = np.zeros_like(u)
    gx[:, :-1, :] = u[:, 1:, :] - u[:, :-1, :]
    gy[:, :, :-1] = u[:, :, 1:] - u[:, :, :-1]
    return gx, gy


def _grad_adjoint(px, py):
    # adjoint of forward differences with a zero last row/column
    out = np.zeros_like(px)
    out[:, :-1, :] -= px[:, :-1, :]
    out[:, 1:, :] += px[:, :-1, :]
    out[:, :, :-1] -= py[:, :, :-1]
    out[:, :, 1:] += py[:, :, :-1]
    return out


def tv_dual(f, weight, iters, tau):
    """Anisotropic TV denoising of a (n, h, w) stack by projected dual ascent.

    Returns ``f - weight * D^T p`` after ``iters`` box-projected gradient
    steps on the dual variable ``p``.
    """
    f = np.ascontiguousarray(f)
    px = np.zeros_like(f)
    py = np.zeros_like(f)
    step = tau / weight
    u = f
    for _ in range(iters):
        gx, gy = _grad(u)
        np.clip(px + step * gx, -1.0, 1.0, out=px)
        np.clip(py + step * gy, -1.0, 1.0, out=py)
        u = f - weight * _grad_adjoint(px, py)
    return u
