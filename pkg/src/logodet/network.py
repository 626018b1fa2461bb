"""The region-based detector: a small conv backbone, RoI / pyramid pooling,
an FC trunk and the two output heads (class softmax + per-class box offsets).

Two pipeline modes share one set of weights:

``shared``
    one backbone pass per image, every RoI pooled from the shared feature map.
``per_region``
    every RoI is cropped and warped to a fixed patch that runs through the
    backbone on its own (the classical R-CNN path).
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .layers import (
    bilinear_warp,
    conv_backward,
    conv_forward,
    dense_backward,
    dense_forward,
    maxpool_backward,
    maxpool_forward,
    relu_backward,
    relu_forward,
    roi_pool_windows,
    roi_pool_windows_backward,
    softmax,
)

MODES = ("shared", "per_region")
PIXEL_MEAN = 127.5
PIXEL_SCALE = 64.0

# instrumentation: number of backbone forward passes, by mode
counters: Counter = Counter()


class ImageTooSmall(ValueError):
    pass


@dataclass(frozen=True)
class Arch:
    n_classes: int
    conv_channels: tuple[int, ...] = (16, 32, 64)
    kernel: int = 3
    fc_dims: tuple[int, ...] = (256, 256)
    levels: tuple[tuple[int, int], ...] = ((4, 4),)
    mode: str = "shared"
    warp_size: int = 32
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        object.__setattr__(self, "fc_dims", tuple(self.fc_dims))
        object.__setattr__(self, "levels", tuple(tuple(l) for l in self.levels))
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.activation not in ("relu", "linear"):
            raise ValueError("activation must be 'relu' or 'linear'")
        if self.n_classes < 1 or not self.levels or not self.conv_channels:
            raise ValueError("invalid architecture")

    @property
    def stride(self) -> int:
        return 2 ** len(self.conv_channels)

    @property
    def pooled_dim(self) -> int:
        return self.conv_channels[-1] * sum(h * w for h, w in self.levels)

    @property
    def fc_in_dims(self) -> list[int]:
        return [self.pooled_dim, *self.fc_dims[:-1]]


@dataclass
class NetworkParams:
    arch: Arch
    tensors: dict[str, np.ndarray]
    bbox_mean: np.ndarray = field(default_factory=lambda: np.zeros(4, dtype=np.float32))
    bbox_std: np.ndarray = field(default_factory=lambda: np.ones(4, dtype=np.float32))

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.arch, {k: v.copy() for k, v in self.tensors.items()},
                             self.bbox_mean.copy(), self.bbox_std.copy())

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams(self.arch, {k: v.astype(dtype) for k, v in self.tensors.items()},
                             self.bbox_mean.astype(dtype), self.bbox_std.astype(dtype))

    def with_mode(self, mode: str) -> "NetworkParams":
        return NetworkParams(replace(self.arch, mode=mode), self.tensors, self.bbox_mean, self.bbox_std)

    @property
    def dtype(self):
        return self.tensors["conv0.w"].dtype

    def is_factored(self, i: int) -> bool:
        return f"fc{i}.first" in self.tensors

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))


def init_params(arch: Arch, seed: int = 0, fc_std: float = 0.01) -> NetworkParams:
    """He-scaled Gaussian conv kernels; small Gaussian FC and head weights."""
    rng = np.random.default_rng(seed)
    t: dict[str, np.ndarray] = {}
    cin = 3
    for i, cout in enumerate(arch.conv_channels):
        fan_in = arch.kernel * arch.kernel * cin
        t[f"conv{i}.w"] = rng.normal(0, np.sqrt(2.0 / fan_in), (arch.kernel, arch.kernel, cin, cout))
        t[f"conv{i}.b"] = np.zeros(cout)
        cin = cout
    for i, (din, dout) in enumerate(zip(arch.fc_in_dims, arch.fc_dims)):
        t[f"fc{i}.w"] = rng.normal(0, np.sqrt(2.0 / din), (dout, din))
        t[f"fc{i}.b"] = np.zeros(dout)
    last = arch.fc_dims[-1]
    t["cls.w"] = rng.normal(0, fc_std, (arch.n_classes + 1, last))
    t["cls.b"] = np.zeros(arch.n_classes + 1)
    t["bbox.w"] = rng.normal(0, fc_std * 0.1, (4 * arch.n_classes, last))
    t["bbox.b"] = np.zeros(4 * arch.n_classes)
    return NetworkParams(arch, {k: v.astype(np.float32) for k, v in t.items()})


def normalize_image(image: np.ndarray, dtype=np.float32) -> np.ndarray:
    return ((np.asarray(image, dtype=dtype) - PIXEL_MEAN) / PIXEL_SCALE).astype(dtype, copy=False)


# ----------------------------------------------------------------- backbone

def _backbone(params: NetworkParams, x: np.ndarray):
    """Batched backbone on normalised (N, H, W, 3) input; returns ``(out, caches)``."""
    arch = params.arch
    min_side = arch.stride
    if x.shape[1] < min_side or x.shape[2] < min_side:
        raise ImageTooSmall(f"input {x.shape[2]}x{x.shape[1]} below backbone minimum {min_side}px")
    caches = []
    h = x
    for i in range(len(arch.conv_channels)):
        h, c_conv = conv_forward(h, params.tensors[f"conv{i}.w"], params.tensors[f"conv{i}.b"])
        c_act = None
        if arch.activation == "relu":
            h, c_act = relu_forward(h)
        h, c_pool = maxpool_forward(h)
        caches.append((c_conv, c_act, c_pool))
    return h, caches


def _backbone_backward(params: NetworkParams, dout: np.ndarray, caches, grads: dict):
    for i in reversed(range(len(caches))):
        c_conv, c_act, c_pool = caches[i]
        dout = maxpool_backward(dout, c_pool)
        if c_act is not None:
            dout = relu_backward(dout, c_act)
        dout, dw, db = conv_backward(dout, c_conv)
        _accum(grads, f"conv{i}.w", dw)
        _accum(grads, f"conv{i}.b", db)
    return dout


def _accum(grads, key, value):
    if key in grads:
        grads[key] += value
    else:
        grads[key] = value


@dataclass
class FeatureMap:
    data: np.ndarray  # (H', W', D)
    stride: int


def forward_backbone(params: NetworkParams, image: np.ndarray) -> FeatureMap:
    """Run the backbone on one raw (H, W, 3) image."""
    counters["backbone"] += 1
    x = normalize_image(image, params.dtype)[None]
    out, _ = _backbone(params, x)
    return FeatureMap(out[0], params.arch.stride)


# ----------------------------------------------------------------- pooling

def project_rois(rois: np.ndarray, stride: int, feat_shape) -> np.ndarray:
    """Image-space boxes -> integer feature windows (divide by stride, round outward)."""
    rois = np.ascontiguousarray(np.asarray(rois, dtype=np.float64).reshape(-1, 4))
    return kernels.roi_windows(rois, float(stride), feat_shape[0], feat_shape[1])


def roi_pool(featmap: FeatureMap, roi, grid: tuple[int, int]) -> np.ndarray:
    """Max-pool one image-space RoI into an (h, w, D) grid."""
    win = project_rois(np.asarray([_as_tuple(roi)]), featmap.stride, featmap.data.shape)
    out, _ = kernels.roi_pool_forward(np.ascontiguousarray(featmap.data), win, grid[0], grid[1])
    return out[0]


def spp_pool(featmap: FeatureMap, roi, levels) -> np.ndarray:
    """Concatenated pyramid of :func:`roi_pool` outputs, flattened row-major per level."""
    return np.concatenate([roi_pool(featmap, roi, lv).reshape(-1) for lv in levels])


def warp_region(image: np.ndarray, roi, out_size: tuple[int, int]) -> np.ndarray:
    """Bilinear crop-and-resize of one RoI to ``out_size = (h, w)``."""
    return bilinear_warp(image, np.asarray([_as_tuple(roi)]), out_size)[0]


def _as_tuple(roi):
    return roi.as_tuple() if hasattr(roi, "as_tuple") else tuple(roi)


# ----------------------------------------------------------------- heads

def _trunk_forward(params: NetworkParams, x: np.ndarray):
    caches = []
    h = x
    t = params.tensors
    for i in range(len(params.arch.fc_dims)):
        if params.is_factored(i):
            z, c1 = dense_forward(h, t[f"fc{i}.first"], 0)
            h, c2 = dense_forward(z, t[f"fc{i}.second"], t[f"fc{i}.b"])
            cache = ("factored", c1, c2)
        else:
            h, c = dense_forward(h, t[f"fc{i}.w"], t[f"fc{i}.b"])
            cache = ("dense", c)
        act = None
        if params.arch.activation == "relu":
            h, act = relu_forward(h)
        caches.append((cache, act))
    return h, caches


def _trunk_backward(params: NetworkParams, dout, caches, grads):
    t = params.tensors
    for i in reversed(range(len(caches))):
        cache, act = caches[i]
        if act is not None:
            dout = relu_backward(dout, act)
        if cache[0] == "factored":
            dz, dw2, db = dense_backward(dout, cache[2], t[f"fc{i}.second"])
            dout, dw1, _ = dense_backward(dz, cache[1], t[f"fc{i}.first"])
            _accum(grads, f"fc{i}.second", dw2)
            _accum(grads, f"fc{i}.first", dw1)
        else:
            dout, dw, db = dense_backward(dout, cache[1], t[f"fc{i}.w"])
            _accum(grads, f"fc{i}.w", dw)
        _accum(grads, f"fc{i}.b", db)
    return dout


def trunk_forward(params: NetworkParams, features: np.ndarray) -> np.ndarray:
    return _trunk_forward(params, features)[0]


def heads_from_trunk(params: NetworkParams, h: np.ndarray):
    t = params.tensors
    logits = h @ t["cls.w"].T + t["cls.b"]
    raw = h @ t["bbox.w"].T + t["bbox.b"]
    return logits, raw


def denormalize_offsets(params: NetworkParams, raw: np.ndarray) -> np.ndarray:
    n = raw.shape[0]
    r = raw.reshape(n, -1, 4) * params.bbox_std + params.bbox_mean
    return r.reshape(n, -1)


def head_forward(params: NetworkParams, features: np.ndarray):
    """Trunk + heads on pooled features ``(R, pooled_dim)`` (or a single vector).

    Returns ``(class_probs (R, C+1), offsets (R, 4C))`` with offsets in box units.
    """
    x = np.asarray(features, dtype=params.dtype)
    single = x.ndim == 1
    x = x.reshape(-1, params.arch.pooled_dim)
    logits, raw = heads_from_trunk(params, trunk_forward(params, x))
    probs, offsets = softmax(logits), denormalize_offsets(params, raw)
    if single:
        return probs[0], offsets[0]
    return probs, offsets


# ----------------------------------------------------------------- features for RoIs

WARP_CHUNK = 128


def _pool_whole(feats: np.ndarray, levels):
    """Pool each (h, w, D) map of a batch over its full extent."""
    N, h, w, _ = feats.shape
    win = np.array([[0, 0, w, h]], dtype=np.intp)
    return np.concatenate([roi_pool_windows(f, win, levels)[0] for f in feats], axis=0)


def roi_features(params: NetworkParams, image: np.ndarray, rois: np.ndarray) -> np.ndarray:
    """Pooled (R, pooled_dim) features for every RoI under the configured mode."""
    arch = params.arch
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    if arch.mode == "shared":
        fm = forward_backbone(params, image)
        if len(rois) == 0:
            return np.zeros((0, arch.pooled_dim), dtype=params.dtype)
        win = project_rois(rois, fm.stride, fm.data.shape)
        return roi_pool_windows(fm.data, win, arch.levels)[0]
    if min(image.shape[:2]) < 1:
        raise ImageTooSmall("empty image")
    out = []
    norm = normalize_image(image, params.dtype)
    for s in range(0, len(rois), WARP_CHUNK):
        patches = bilinear_warp(norm, rois[s:s + WARP_CHUNK], (arch.warp_size, arch.warp_size))
        counters["backbone"] += 1
        feats, _ = _backbone(params, patches)
        out.append(_pool_whole(feats, arch.levels))
    if not out:
        return np.zeros((0, arch.pooled_dim), dtype=params.dtype)
    return np.concatenate(out, axis=0)


def detect_image(params: NetworkParams, image: np.ndarray, rois: np.ndarray):
    """Raw per-RoI ``(probs (R, C+1), offsets (R, 4C))`` for one image."""
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    C = params.arch.n_classes
    if len(rois) == 0:
        if min(np.asarray(image).shape[:2]) < params.arch.stride:
            raise ImageTooSmall("image below backbone minimum")
        return np.zeros((0, C + 1), dtype=params.dtype), np.zeros((0, 4 * C), dtype=params.dtype)
    return head_forward(params, roi_features(params, image, rois))


# ----------------------------------------------------------------- training graph

def forward_loss(params: NetworkParams, image: np.ndarray, rois: np.ndarray, labels: np.ndarray,
                 targets: np.ndarray, lam: float = 1.0, normalizer: int | None = None,
                 want_grads: bool = True):
    """Multi-task loss of one image's RoI minibatch and (optionally) its gradients.

    ``targets`` are already normalised regression targets, rows of background
    RoIs are ignored.  Losses are divided by ``normalizer`` (default: number
    of RoIs) so several images can be summed into one minibatch.
    """
    from .training import multitask_loss_batch

    arch = params.arch
    dtype = params.dtype
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    norm_img = normalize_image(image, dtype)
    if arch.mode == "shared":
        feat, bcache = _backbone(params, norm_img[None])
        fmap = feat[0]
        win = project_rois(rois, arch.stride, fmap.shape)
        pooled, pcache = roi_pool_windows(fmap, win, arch.levels)
    else:
        patches = bilinear_warp(norm_img, rois, (arch.warp_size, arch.warp_size))
        feat, bcache = _backbone(params, patches)
        N, h, w, _ = feat.shape
        whole = np.array([[0, 0, w, h]], dtype=np.intp)
        pooled_parts = []
        pcache = []
        for f in feat:
            p, c = roi_pool_windows(f, whole, arch.levels)
            pooled_parts.append(p)
            pcache.append(c)
        pooled = np.concatenate(pooled_parts, axis=0)
    hidden, tcache = _trunk_forward(params, pooled)
    logits, raw = heads_from_trunk(params, hidden)
    n = normalizer or len(rois)
    loss, dlogits, draw, parts = multitask_loss_batch(logits, raw, labels, targets, lam, n)
    if not want_grads:
        return loss, None, parts
    grads: dict[str, np.ndarray] = {}
    t = params.tensors
    grads["cls.w"] = dlogits.T @ hidden
    grads["cls.b"] = dlogits.sum(axis=0)
    grads["bbox.w"] = draw.T @ hidden
    grads["bbox.b"] = draw.sum(axis=0)
    dhidden = dlogits @ t["cls.w"] + draw @ t["bbox.w"]
    dpooled = _trunk_backward(params, dhidden, tcache, grads)
    if arch.mode == "shared":
        dfeat = roi_pool_windows_backward(dpooled, pcache, arch.levels)[None]
    else:
        per = dpooled.shape[1]
        dfeat = np.stack([
            roi_pool_windows_backward(dpooled[i:i + 1].reshape(1, per), pcache[i], arch.levels)
            for i in range(len(pcache))
        ])
    _backbone_backward(params, dfeat, bcache, grads)
    return loss, grads, parts


def activation_signature(params: NetworkParams, image, rois, labels, targets) -> bytes:
    """Fingerprint of every piecewise-linear branch taken in a forward pass.

    Two parameter settings with equal signatures lie on the same linear piece,
    which is what a finite-difference check needs.
    """
    arch = params.arch
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    norm_img = normalize_image(image, params.dtype)
    bits = []
    if arch.mode == "shared":
        feat, caches = _backbone(params, norm_img[None])
        win = project_rois(rois, arch.stride, feat[0].shape)
        pooled, (args, _) = roi_pool_windows(feat[0], win, arch.levels)
        bits += [a.tobytes() for a in args]
    else:
        patches = bilinear_warp(norm_img, rois, (arch.warp_size, arch.warp_size))
        feat, caches = _backbone(params, patches)
        N, h, w, _ = feat.shape
        whole = np.array([[0, 0, w, h]], dtype=np.intp)
        pooled_parts = []
        for f in feat:
            p, (args, _) = roi_pool_windows(f, whole, arch.levels)
            pooled_parts.append(p)
            bits += [a.tobytes() for a in args]
        pooled = np.concatenate(pooled_parts, axis=0)
    for c_conv, c_act, c_pool in caches:
        if c_act is not None:
            bits.append(np.packbits(c_act).tobytes())
        bits.append(c_pool[0].tobytes())
    hidden, tcache = _trunk_forward(params, pooled)
    for _, act in tcache:
        if act is not None:
            bits.append(np.packbits(act).tobytes())
    _, raw = heads_from_trunk(params, hidden)
    fg = labels > 0
    if fg.any():
        sel = raw.reshape(len(raw), -1, 4)[np.nonzero(fg)[0], labels[fg] - 1]
        bits.append(np.packbits(np.abs(sel - targets[fg]) < 1).tobytes())
    return b"".join(bits)
