"""Layer primitives with explicit backward passes.

Activations are channels-first, ``(n, C, *spatial)``. Backward functions
never reduce over the batch axis, so parameter gradients come out per
example.
"""

from __future__ import annotations

import math

import numpy as np

from dpsgd.errors import ConfigurationError, ShapeError

WS_VARIANCE_FLOOR = 1e-10
GN_EPSILON = 1e-5


def _standardize_rows(rows: np.ndarray, floor: float):
    mu = rows.mean(axis=-1, keepdims=True)
    var = rows.var(axis=-1, keepdims=True)
    floored = var <= floor
    std = np.sqrt(np.where(floored, floor, var))
    return (rows - mu) / std, std, floored


def weight_standardize(w, fan_in: int) -> np.ndarray:
    """Standardizes each output unit's weights over its fan-in.

    ``W_hat[i, j] = (W[i, j] - mean_i) / (std_i * sqrt(fan_in))`` with the
    population std, floored at ``sqrt(1e-10)`` so constant rows map to zero.
    ``w`` has the output units on axis 0; the remaining axes form the fan-in.
    """
    w = np.asarray(w, dtype=np.float64)
    rows = w.reshape(w.shape[0], -1)
    if rows.shape[1] != fan_in:
        raise ShapeError(f"fan_in {fan_in} does not match weight fan-in extent {rows.shape[1]}")
    xhat, _, _ = _standardize_rows(rows, WS_VARIANCE_FLOOR)
    return (xhat / math.sqrt(fan_in)).reshape(w.shape)


def weight_standardize_backward(w: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Pulls gradients w.r.t. standardized weights back to the raw weights.

    ``grad_out`` may carry leading batch axes: shape ``(..., *w.shape)``.
    """
    rows = w.reshape(w.shape[0], -1)
    fan_in = rows.shape[1]
    xhat, std, floored = _standardize_rows(rows, WS_VARIANCE_FLOOR)
    lead = grad_out.shape[: grad_out.ndim - w.ndim]
    g = grad_out.reshape(*lead, *rows.shape) / math.sqrt(fan_in)
    g_mean = g.mean(axis=-1, keepdims=True)
    # A floored std is constant in w, so the variance path drops out.
    proj = np.where(floored, 0.0, (g * xhat).mean(axis=-1, keepdims=True))
    grad = (g - g_mean - xhat * proj) / std
    return grad.reshape(*lead, *w.shape)


def _grouped(x: np.ndarray, groups: int) -> np.ndarray:
    n, c = x.shape[:2]
    if groups < 1 or c % groups:
        raise ConfigurationError(f"{c} channels are not divisible into {groups} groups")
    return x.reshape(n, groups, -1)


def group_norm_forward(x, groups: int, scale=None, shift=None, eps: float = GN_EPSILON) -> np.ndarray:
    """Group normalization of a ``(n, C, *spatial)`` batch, statistics per example."""
    return _group_norm(np.asarray(x, dtype=np.float64), groups, scale, shift, eps)[0]


def _group_norm(x, groups, scale, shift, eps):
    c = x.shape[1]
    xg = _grouped(x, groups)
    mu = xg.mean(axis=-1, keepdims=True)
    std = np.sqrt(xg.var(axis=-1, keepdims=True) + eps)
    xhat = ((xg - mu) / std).reshape(x.shape)
    bshape = (1, c) + (1,) * (x.ndim - 2)
    y = xhat
    if scale is not None:
        y = y * np.reshape(scale, bshape)
    if shift is not None:
        y = y + np.reshape(shift, bshape)
    return y, (xhat, std)


def group_norm_backward(grad_out, cache, groups: int, scale):
    """Returns (grad_input, per-example grad_scale, per-example grad_shift)."""
    xhat, std = cache
    n, c = grad_out.shape[:2]
    spatial = tuple(range(2, grad_out.ndim))
    grad_scale = (grad_out * xhat).sum(axis=spatial)
    grad_shift = grad_out.sum(axis=spatial)
    dxhat = grad_out * np.reshape(scale, (1, c) + (1,) * len(spatial))
    dg = dxhat.reshape(n, groups, -1)
    xg = xhat.reshape(n, groups, -1)
    dx = (dg - dg.mean(axis=-1, keepdims=True) - xg * (dg * xg).mean(axis=-1, keepdims=True)) / std
    return dx.reshape(grad_out.shape), grad_scale, grad_shift


def im2col3x3(x: np.ndarray) -> np.ndarray:
    """(n, C, H, W) -> (n, H*W, C*9) patches of a zero-padded 3x3 'same' convolution."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, h * w, c * 9)


def col2im3x3(cols: np.ndarray, shape) -> np.ndarray:
    n, c, h, w = shape
    patches = cols.reshape(n, h, w, c, 3, 3)
    out = np.zeros((n, c, h + 2, w + 2))
    for kh in range(3):
        for kw in range(3):
            out[:, :, kh : kh + h, kw : kw + w] += patches[..., kh, kw].transpose(0, 3, 1, 2)
    return out[:, :, 1:-1, 1:-1]


def conv3x3_forward(x: np.ndarray, w: np.ndarray):
    """Stride-1 'same' convolution. ``w`` is (C_out, C_in, 3, 3); returns (y, cols)."""
    n, _, h, wd = x.shape
    cols = im2col3x3(x)
    y = cols @ w.reshape(w.shape[0], -1).T
    return y.transpose(0, 2, 1).reshape(n, w.shape[0], h, wd), cols


def conv3x3_backward(grad_out: np.ndarray, cols: np.ndarray, w: np.ndarray, in_shape):
    """Returns (grad_input, per-example grad_w of shape (n, *w.shape))."""
    n, c_out = grad_out.shape[:2]
    g = grad_out.reshape(n, c_out, -1).transpose(0, 2, 1)
    grad_w = np.einsum("npo,npk->nok", g, cols).reshape(n, *w.shape)
    grad_x = col2im3x3(g @ w.reshape(c_out, -1), in_shape)
    return grad_x, grad_w
