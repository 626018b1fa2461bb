"""Pure-Python/numpy twins of the kernels in ``_core.pyx``.

Used when the extension is not built or ``LOGODET_PURE=1`` is set.
Results are identical to the compiled versions, only slower.
"""
import math

import numpy as np


def _find(parent, x):
    root = x
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:
        parent[x], x = root, parent[x]
    return root


def _join(parent, rank, size, a, b):
    if rank[a] > rank[b]:
        parent[b] = a
        size[a] += size[b]
        return a
    parent[a] = b
    size[b] += size[a]
    if rank[a] == rank[b]:
        rank[b] += 1
    return b


def segment_graph(n_vertices, src, dst, weight, k, min_size):
    parent = list(range(n_vertices))
    rank = [0] * n_vertices
    size = [1] * n_vertices
    thresh = [float(k)] * n_vertices
    src = src.tolist()
    dst = dst.tolist()
    weight = weight.tolist()
    for a, b, w in zip(src, dst, weight):
        a = _find(parent, a)
        b = _find(parent, b)
        if a != b and w <= thresh[a] and w <= thresh[b]:
            r = _join(parent, rank, size, a, b)
            thresh[r] = w + k / size[r]
    for a, b in zip(src, dst):
        a = _find(parent, a)
        b = _find(parent, b)
        if a != b and (size[a] < min_size or size[b] < min_size):
            _join(parent, rank, size, a, b)
    return np.array([_find(parent, i) for i in range(n_vertices)], dtype=np.intp)


def roi_windows(rois, stride, height, width):
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    out = np.empty((len(rois), 4), dtype=np.intp)
    for i, (a, b, c, d) in enumerate(rois):
        x0 = min(max(int(math.floor(a / stride)), 0), width - 1)
        y0 = min(max(int(math.floor(b / stride)), 0), height - 1)
        x1 = min(max(int(math.ceil(c / stride)), x0 + 1), width)
        y1 = min(max(int(math.ceil(d / stride)), y0 + 1), height)
        out[i] = (x0, y0, x1, y1)
    return out


def roi_pool_forward(feat, windows, grid_h, grid_w):
    H, W, D = feat.shape
    R = len(windows)
    out = np.empty((R, grid_h, grid_w, D), dtype=feat.dtype)
    arg = np.empty((R, grid_h, grid_w, D), dtype=np.intp)
    for r, (x0, y0, x1, y1) in enumerate(windows):
        w = x1 - x0
        h = y1 - y0
        for i in range(grid_h):
            hs = y0 + (i * h) // grid_h
            he = y0 + ((i + 1) * h + grid_h - 1) // grid_h
            for j in range(grid_w):
                ws = x0 + (j * w) // grid_w
                we = x0 + ((j + 1) * w + grid_w - 1) // grid_w
                cell = feat[hs:he, ws:we].reshape(-1, D)
                best = np.argmax(cell, axis=0)
                out[r, i, j] = cell[best, np.arange(D)]
                cw = we - ws
                arg[r, i, j] = (hs + best // cw) * W + ws + best % cw
    return out, arg


def roi_pool_backward(grad, argmax, height, width):
    D = grad.shape[-1]
    out = np.zeros((height * width, D), dtype=grad.dtype)
    cols = np.broadcast_to(np.arange(D), argmax.shape)
    # np.add.at accumulates in index order, matching the compiled loop
    np.add.at(out, (argmax.reshape(-1), cols.reshape(-1)), grad.reshape(-1))
    return out.reshape(height, width, D)
