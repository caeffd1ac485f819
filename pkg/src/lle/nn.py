"""Minimal NHWC numpy layers (forward + backward) shared by the predictor and the
frozen feature network."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_out_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def im2col(x: np.ndarray, k: int, s: int, p: int) -> np.ndarray:
    """``(N, H, W, C)`` -> ``(N, Ho, Wo, C * k * k)`` patch matrix (zero padding)."""
    if p:
        x = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]
    n, ho, wo, c = win.shape[:4]
    return win.reshape(n, ho, wo, c * k * k)


def col2im(dcols: np.ndarray, x_shape, k: int, s: int, p: int) -> np.ndarray:
    n, h, w, c = x_shape
    ho, wo = dcols.shape[1], dcols.shape[2]
    d = dcols.reshape(n, ho, wo, c, k, k)
    dx = np.zeros((n, h + 2 * p, w + 2 * p, c))
    for i in range(k):
        for j in range(k):
            dx[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :] += d[..., i, j]
    return dx[:, p : p + h, p : p + w, :]


def conv2d(x, weight, bias, s, p):
    """Returns output and the patch matrix needed by :func:`conv2d_backward`.

    ``weight`` has shape ``(C_out, C_in, k, k)``.
    """
    cout, _, k, _ = weight.shape
    cols = im2col(x, k, s, p)
    out = cols @ weight.reshape(cout, -1).T
    if bias is not None:
        out += bias
    return out, cols


def conv2d_backward(dout, cols, x_shape, weight, s, p, need_dx=True):
    cout, _, k, _ = weight.shape
    flat = dout.reshape(-1, cout)
    dw = (flat.T @ cols.reshape(flat.shape[0], -1)).reshape(weight.shape)
    db = flat.sum(axis=0)
    dx = None
    if need_dx:
        dcols = dout @ weight.reshape(cout, -1)
        dx = col2im(dcols, x_shape, k, s, p)
    return dx, dw, db


def leaky_relu(x, slope):
    return np.where(x > 0, x, slope * x)


def leaky_relu_grad(x, slope):
    return np.where(x > 0, 1.0, slope)


def batchnorm_train(x, scale, shift, eps):
    """Normalize each channel over (N, H, W) with batch statistics."""
    mean = x.mean(axis=(0, 1, 2))
    var = x.var(axis=(0, 1, 2))
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return xhat * scale + shift, (xhat, inv_std, mean, var)


def batchnorm_backward(dout, scale, xhat, inv_std):
    m = dout.shape[0] * dout.shape[1] * dout.shape[2]
    dscale = np.sum(dout * xhat, axis=(0, 1, 2))
    dshift = np.sum(dout, axis=(0, 1, 2))
    dxhat = dout * scale
    dx = inv_std / m * (m * dxhat - dxhat.sum(axis=(0, 1, 2)) - xhat * np.sum(dxhat * xhat, axis=(0, 1, 2)))
    return dx, dscale, dshift
