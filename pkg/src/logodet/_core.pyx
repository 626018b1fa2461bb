# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: graph segmentation and RoI max pooling.

Each function has a behaviour-identical twin in ``_fallback.py``.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, ceil

cnp.import_array()

ctypedef fused floating:
    float
    double


cdef inline Py_ssize_t _find(Py_ssize_t[::1] parent, Py_ssize_t x) noexcept nogil:
    cdef Py_ssize_t root = x, nxt
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:
        nxt = parent[x]
        parent[x] = root
        x = nxt
    return root


cdef inline Py_ssize_t _join(Py_ssize_t[::1] parent, Py_ssize_t[::1] rank,
                             Py_ssize_t[::1] size, Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    if rank[a] > rank[b]:
        parent[b] = a
        size[a] += size[b]
        return a
    parent[a] = b
    size[b] += size[a]
    if rank[a] == rank[b]:
        rank[b] += 1
    return b


def segment_graph(Py_ssize_t n_vertices, const cnp.int64_t[::1] src, const cnp.int64_t[::1] dst,
                  const double[::1] weight, double k, Py_ssize_t min_size):
    """Felzenszwalb-Huttenlocher merging over edges pre-sorted by weight.

    Returns the component root of every vertex.
    """
    cdef Py_ssize_t n_edges = src.shape[0]
    cdef Py_ssize_t i, a, b, r
    parent_arr = np.arange(n_vertices, dtype=np.intp)
    rank_arr = np.zeros(n_vertices, dtype=np.intp)
    size_arr = np.ones(n_vertices, dtype=np.intp)
    thresh_arr = np.full(n_vertices, k, dtype=np.float64)
    cdef Py_ssize_t[::1] parent = parent_arr
    cdef Py_ssize_t[::1] rank = rank_arr
    cdef Py_ssize_t[::1] size = size_arr
    cdef double[::1] thresh = thresh_arr
    with nogil:
        for i in range(n_edges):
            a = _find(parent, src[i])
            b = _find(parent, dst[i])
            if a != b and weight[i] <= thresh[a] and weight[i] <= thresh[b]:
                r = _join(parent, rank, size, a, b)
                thresh[r] = weight[i] + k / size[r]
        for i in range(n_edges):
            a = _find(parent, src[i])
            b = _find(parent, dst[i])
            if a != b and (size[a] < min_size or size[b] < min_size):
                _join(parent, rank, size, a, b)
        for i in range(n_vertices):
            _find(parent, i)
    return parent_arr


def roi_windows(const double[:, ::1] rois, double stride, Py_ssize_t height, Py_ssize_t width):
    """Project image-space boxes to integer feature windows, rounding outward."""
    cdef Py_ssize_t n = rois.shape[0], i
    out_arr = np.empty((n, 4), dtype=np.intp)
    cdef Py_ssize_t[:, ::1] out = out_arr
    cdef Py_ssize_t x0, y0, x1, y1
    for i in range(n):
        x0 = <Py_ssize_t>floor(rois[i, 0] / stride)
        y0 = <Py_ssize_t>floor(rois[i, 1] / stride)
        x1 = <Py_ssize_t>ceil(rois[i, 2] / stride)
        y1 = <Py_ssize_t>ceil(rois[i, 3] / stride)
        x0 = min(max(x0, 0), width - 1)
        y0 = min(max(y0, 0), height - 1)
        x1 = min(max(x1, x0 + 1), width)
        y1 = min(max(y1, y0 + 1), height)
        out[i, 0] = x0
        out[i, 1] = y0
        out[i, 2] = x1
        out[i, 3] = y1
    return out_arr


def roi_pool_forward(floating[:, :, ::1] feat, const Py_ssize_t[:, ::1] windows,
                     Py_ssize_t grid_h, Py_ssize_t grid_w):
    """Max-pool each window into a ``grid_h x grid_w`` grid.

    Returns ``(out, argmax)`` with ``argmax`` holding flat ``y * W + x`` indices.
    """
    cdef Py_ssize_t H = feat.shape[0], W = feat.shape[1], D = feat.shape[2]
    cdef Py_ssize_t R = windows.shape[0]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((R, grid_h, grid_w, D), dtype=dtype)
    arg_arr = np.empty((R, grid_h, grid_w, D), dtype=np.intp)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t r, i, j, y, x, d, x0, y0, h, w, hs, he, ws, we, idx
    cdef floating v
    with nogil:
        for r in range(R):
            x0 = windows[r, 0]
            y0 = windows[r, 1]
            w = windows[r, 2] - x0
            h = windows[r, 3] - y0
            for i in range(grid_h):
                hs = y0 + (i * h) // grid_h
                he = y0 + ((i + 1) * h + grid_h - 1) // grid_h
                for j in range(grid_w):
                    ws = x0 + (j * w) // grid_w
                    we = x0 + ((j + 1) * w + grid_w - 1) // grid_w
                    for d in range(D):
                        out[r, i, j, d] = feat[hs, ws, d]
                        arg[r, i, j, d] = hs * W + ws
                    for y in range(hs, he):
                        for x in range(ws, we):
                            idx = y * W + x
                            for d in range(D):
                                v = feat[y, x, d]
                                if v > out[r, i, j, d]:
                                    out[r, i, j, d] = v
                                    arg[r, i, j, d] = idx
    return out_arr, arg_arr


def roi_pool_backward(floating[:, :, :, ::1] grad, const Py_ssize_t[:, :, :, ::1] argmax,
                      Py_ssize_t height, Py_ssize_t width):
    cdef Py_ssize_t R = grad.shape[0], GH = grad.shape[1], GW = grad.shape[2], D = grad.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((height * width, D), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t r, i, j, d
    # fixed loop order keeps the accumulation deterministic
    with nogil:
        for r in range(R):
            for i in range(GH):
                for j in range(GW):
                    for d in range(D):
                        out[argmax[r, i, j, d], d] += grad[r, i, j, d]
    return out_arr.reshape(height, width, D)
