"""Differentiable building blocks on NHWC numpy arrays.

Every ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
consumes ``(grad_out, cache)``.  Arithmetic follows the input dtype so the
same code runs in float32 for training and float64 for gradient checks.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Stride-1 'same' convolution. ``x``: (N, H, W, C); ``w``: (k, k, C, D)."""
    k = w.shape[0]
    p = k // 2
    N, H, W, C = x.shape
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = sliding_window_view(xp, (k, k), axis=(1, 2))  # N, H, W, C, k, k
    cols = cols.transpose(0, 1, 2, 4, 5, 3).reshape(N * H * W, k * k * C)
    out = cols @ w.reshape(k * k * C, -1) + b
    return out.reshape(N, H, W, -1), (cols, x.shape, w)


def conv_backward(dout: np.ndarray, cache):
    cols, xshape, w = cache
    N, H, W, C = xshape
    k = w.shape[0]
    p = k // 2
    d2 = dout.reshape(N * H * W, -1)
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(k * k * C, -1).T).reshape(N, H, W, k, k, C)
    dxp = np.zeros((N, H + 2 * p, W + 2 * p, C), dtype=dout.dtype)
    for dy in range(k):
        for dx in range(k):
            dxp[:, dy:dy + H, dx:dx + W, :] += dcols[:, :, :, dy, dx, :]
    return dxp[:, p:p + H, p:p + W, :], dw, db


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def maxpool_forward(x: np.ndarray):
    """2x2 / stride-2 max pooling; odd trailing rows/columns are dropped."""
    N, H, W, C = x.shape
    H2, W2 = H // 2, W // 2
    xc = x[:, :H2 * 2, :W2 * 2, :]
    blocks = xc.reshape(N, H2, 2, W2, 2, C).transpose(0, 1, 3, 5, 2, 4).reshape(N, H2, W2, C, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape)


def maxpool_backward(dout, cache):
    arg, shape = cache
    N, H, W, C = shape
    H2, W2 = H // 2, W // 2
    onehot = (arg[..., None] == np.arange(4)).astype(dout.dtype) * dout[..., None]
    blocks = onehot.reshape(N, H2, W2, C, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(N, H2 * 2, W2 * 2, C)
    dx = np.zeros(shape, dtype=dout.dtype)
    dx[:, :H2 * 2, :W2 * 2, :] = blocks
    return dx


def dense_forward(x, w, b):
    """``x``: (N, in); ``w``: (out, in)."""
    return x @ w.T + b, x


def dense_backward(dout, x, w):
    return dout @ w, dout.T @ x, dout.sum(axis=0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def roi_pool_windows(feat: np.ndarray, windows: np.ndarray, levels) -> tuple[np.ndarray, list]:
    """Pool integer feature windows at each pyramid level and concatenate.

    ``feat``: (H, W, D); ``windows``: (R, 4) ``x0, y0, x1, y1`` in feature cells.
    Returns ``(R, D * sum(h * w))`` features, row-major within each level.
    """
    feat = np.ascontiguousarray(feat)
    windows = np.ascontiguousarray(windows, dtype=np.intp)
    outs = []
    args = []
    for gh, gw in levels:
        o, a = kernels.roi_pool_forward(feat, windows, gh, gw)
        outs.append(o.reshape(len(windows), -1))
        args.append(a)
    return np.concatenate(outs, axis=1), (args, feat.shape)


def roi_pool_windows_backward(dout: np.ndarray, cache, levels) -> np.ndarray:
    args, (H, W, D) = cache
    dfeat = np.zeros((H, W, D), dtype=dout.dtype)
    start = 0
    for (gh, gw), a in zip(levels, args):
        n = gh * gw * D
        g = np.ascontiguousarray(dout[:, start:start + n].reshape(-1, gh, gw, D))
        dfeat += kernels.roi_pool_backward(g, a, H, W)
        start += n
    return dfeat


def bilinear_warp(image: np.ndarray, rois: np.ndarray, out_size: tuple[int, int]) -> np.ndarray:
    """Crop every RoI and resize it bilinearly to ``out_size = (h, w)``.

    Output pixel centres are spread uniformly over the crop (align-corners off);
    samples outside the image clamp to the border.
    """
    img = np.asarray(image)
    H, W = img.shape[:2]
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    oh, ow = out_size
    fy = (np.arange(oh) + 0.5) / oh
    fx = (np.arange(ow) + 0.5) / ow
    ys = rois[:, 1:2] + fy[None, :] * (rois[:, 3:4] - rois[:, 1:2]) - 0.5
    xs = rois[:, 0:1] + fx[None, :] * (rois[:, 2:3] - rois[:, 0:1]) - 0.5
    ys = np.clip(ys, 0, H - 1)
    xs = np.clip(xs, 0, W - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = (ys - y0)[:, :, None, None]
    wx = (xs - x0)[:, None, :, None]
    dtype = img.dtype if np.issubdtype(img.dtype, np.floating) else np.float64
    img = img.astype(dtype, copy=False)
    if img.ndim == 2:
        img = img[..., None]

    def g(yi, xi):
        return img[yi[:, :, None], xi[:, None, :]]

    top = g(y0, x0) * (1 - wx) + g(y0, x1) * wx
    bot = g(y1, x0) * (1 - wx) + g(y1, x1) * wx
    return (top * (1 - wy) + bot * wy).astype(dtype, copy=False)
