"""RoI labelling, the multi-task objective, SGD fine-tuning and gradient checks."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from .boxes import encode_boxes, iou_matrix
from .dataset import Dataset
from .layers import softmax
from .network import Arch, NetworkParams, activation_signature, forward_loss, init_params

log = logging.getLogger(__name__)


class NoForegroundRoIs(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    lr: float = 0.01
    lr_steps: tuple[float, ...] = (0.7,)  # fractions of the run where lr *= gamma
    gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    images_per_batch: int = 2
    rois_per_image: int = 32
    fg_fraction: float = 0.25
    fg_iou: float = 0.5
    bg_iou: tuple[float, float] = (0.1, 0.5)
    lam: float = 1.0
    include_gt: bool = True
    max_retries: int = 3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lr_steps", tuple(self.lr_steps))
        object.__setattr__(self, "bg_iou", tuple(self.bg_iou))
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not 0 < self.fg_fraction < 1:
            raise ValueError("fg_fraction must be in (0, 1)")
        lo, hi = self.bg_iou
        if not 0 <= lo <= hi <= self.fg_iou <= 1:
            raise ValueError("need 0 <= bg_lo <= bg_hi <= fg_iou <= 1")
        if self.images_per_batch < 1 or self.rois_per_image < 1:
            raise ValueError("minibatch sizes must be positive")
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("invalid optimiser settings")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LabeledRois:
    rois: np.ndarray      # (M, 4)
    labels: np.ndarray    # (M,) 0 = background
    targets: np.ndarray   # (M, 4) un-normalised; zero rows for background
    index: np.ndarray     # positions in the input proposal list (-1 for appended GT boxes)


def assign_roi_labels(proposals: np.ndarray, gt_boxes: np.ndarray, gt_labels: np.ndarray,
                      cfg: TrainConfig = TrainConfig(), include_gt: bool = False) -> LabeledRois:
    """Label RoIs by their best ground-truth overlap; RoIs below the bg interval are dropped."""
    props = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    index = np.arange(len(props))
    if include_gt and len(gts):
        props = np.concatenate([props, gts])
        index = np.concatenate([index, np.full(len(gts), -1)])
    if len(gts) == 0:
        overlap = np.zeros(len(props))
        arg = np.zeros(len(props), dtype=np.int64)
    else:
        ious = iou_matrix(props, gts)
        arg = ious.argmax(axis=1)
        overlap = ious[np.arange(len(props)), arg]
    fg = overlap >= cfg.fg_iou
    lo, hi = cfg.bg_iou
    bg = (overlap >= lo) & (overlap < hi) & ~fg
    keep = fg | bg
    labels = np.where(fg, gt_labels[arg] if len(gts) else 0, 0)[keep]
    targets = np.zeros((int(keep.sum()), 4))
    fg_k = fg[keep]
    if fg_k.any():
        targets[fg_k] = encode_boxes(props[keep][fg_k], gts[arg[keep][fg_k]])
    return LabeledRois(props[keep], labels.astype(np.int64), targets, index[keep])


def smooth_l1(x: np.ndarray):
    ax = np.abs(x)
    val = np.where(ax < 1, 0.5 * x * x, ax - 0.5)
    grad = np.where(ax < 1, x, np.sign(x))
    return val, grad


def multitask_loss(class_probs: np.ndarray, offsets: np.ndarray, label: int,
                   target: np.ndarray | None, lam: float = 1.0):
    """Loss of a single RoI: ``-log p[label] + lam * [label >= 1] * smoothL1(offsets[label] - target)``.

    Returns ``(loss, d_logits, d_offsets)``; the logit gradient assumes
    ``class_probs`` came from a softmax.
    """
    p = np.asarray(class_probs, dtype=np.float64)
    off = np.asarray(offsets, dtype=np.float64).reshape(-1, 4)
    if (label >= 1) != (target is not None):
        raise ValueError("a regression target is required exactly for foreground labels")
    loss = -np.log(max(p[label], np.finfo(np.float64).tiny))
    d_logits = p.copy()
    d_logits[label] -= 1.0
    d_off = np.zeros_like(off)
    if label >= 1:
        v, g = smooth_l1(off[label - 1] - np.asarray(target, dtype=np.float64))
        loss += lam * v.sum()
        d_off[label - 1] = lam * g
    return float(loss), d_logits, d_off.reshape(-1)


def multitask_loss_batch(logits: np.ndarray, raw: np.ndarray, labels: np.ndarray, targets: np.ndarray,
                         lam: float, normalizer: int):
    """Batched loss on logits; returns ``(loss, d_logits, d_raw, (cls_loss, loc_loss))``."""
    n = len(labels)
    probs = softmax(logits)
    idx = np.arange(n)
    p_true = probs[idx, labels]
    cls_loss = -np.log(np.maximum(p_true, np.finfo(probs.dtype).tiny)).sum() / normalizer
    d_logits = probs.copy()
    d_logits[idx, labels] -= 1
    d_logits /= normalizer
    d_raw = np.zeros_like(raw)
    loc_loss = 0.0
    fg = np.nonzero(labels > 0)[0]
    if len(fg):
        r = raw.reshape(n, -1, 4)
        diff = r[fg, labels[fg] - 1] - targets[fg]
        val, g = smooth_l1(diff)
        loc_loss = lam * val.sum() / normalizer
        dr = d_raw.reshape(n, -1, 4)
        dr[fg, labels[fg] - 1] = (lam * g / normalizer).astype(raw.dtype)
    d_logits = d_logits.astype(logits.dtype)
    return float(cls_loss + loc_loss), d_logits, d_raw, (float(cls_loss), float(loc_loss))


def sample_minibatch(labeled: LabeledRois, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    fg = np.nonzero(labeled.labels > 0)[0]
    bg = np.nonzero(labeled.labels == 0)[0]
    n_fg = min(int(round(cfg.fg_fraction * cfg.rois_per_image)), len(fg))
    n_bg = min(cfg.rois_per_image - n_fg, len(bg))
    pick_fg = rng.choice(fg, n_fg, replace=False) if n_fg else fg[:0]
    pick_bg = rng.choice(bg, n_bg, replace=False) if n_bg else bg[:0]
    return np.concatenate([pick_fg, pick_bg])


def target_stats(labeled: Sequence[LabeledRois]):
    fg = [l.targets[l.labels > 0] for l in labeled]
    fg = np.concatenate(fg) if fg else np.zeros((0, 4))
    if len(fg) < 2:
        return np.zeros(4), np.ones(4)
    std = fg.std(axis=0)
    return fg.mean(axis=0), np.where(std > 1e-6, std, 1.0)


@dataclass
class TrainResult:
    params: NetworkParams
    loss_trace: np.ndarray
    skipped: int = 0
    parts_trace: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    snapshots: dict[int, NetworkParams] = field(default_factory=dict)


def learning_rate(cfg: TrainConfig, it: int) -> float:
    lr = cfg.lr
    for s in cfg.lr_steps:
        if it >= int(s * cfg.iterations):
            lr *= cfg.gamma
    return lr


def train(ds: Dataset, proposals: Sequence[np.ndarray], cfg: TrainConfig, arch: Arch | None = None,
          init: NetworkParams | None = None,
          progress: Callable[[int, float], None] | None = None,
          snapshots: Sequence[int] = ()) -> TrainResult:
    """SGD-with-momentum fine-tuning over image-centric RoI minibatches.

    ``proposals[i]`` belongs to ``ds.annotations[i]``.  Deterministic for a
    fixed ``cfg.seed``.  ``snapshots`` lists iteration counts at which a copy
    of the weights is kept (the schedule is still that of ``cfg.iterations``).
    """
    if len(proposals) != len(ds):
        raise ValueError("need one proposal array per training image")
    if arch is None and init is None:
        arch = Arch(n_classes=ds.n_classes)
    params = init.copy() if init is not None else init_params(arch, seed=cfg.seed)
    if len(ds) == 0:
        raise ValueError("empty training set")
    if any(len(np.asarray(p).reshape(-1, 4)) == 0 for p in proposals) and not cfg.include_gt:
        raise ValueError("every training image needs at least one proposal")
    labeled = [
        assign_roi_labels(p, a.boxes, a.labels, cfg, include_gt=cfg.include_gt)
        for p, a in zip(proposals, ds.annotations)
    ]
    mean, std = target_stats(labeled)
    params.bbox_mean = mean.astype(params.dtype)
    params.bbox_std = std.astype(params.dtype)
    snap_at = set(int(s) for s in snapshots)
    saved: dict[int, NetworkParams] = {}
    if 0 in snap_at:
        saved[0] = params.copy()
    if cfg.iterations == 0:
        return TrainResult(params, np.zeros(0), snapshots=saved)

    rng = np.random.default_rng([cfg.seed, 1])
    velocity = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    cache: dict[int, np.ndarray] = {}
    order = rng.permutation(len(ds))
    cursor = 0
    losses = []
    parts = []
    skipped = 0

    def next_image():
        nonlocal order, cursor
        if cursor >= len(order):
            order = rng.permutation(len(ds))
            cursor = 0
        i = int(order[cursor])
        cursor += 1
        return i

    for it in range(cfg.iterations):
        batch = []
        for _attempt in range(cfg.max_retries + 1):
            batch = []
            for _ in range(cfg.images_per_batch):
                i = next_image()
                sel = sample_minibatch(labeled[i], cfg, rng)
                if len(sel):
                    batch.append((i, sel))
            if any((labeled[i].labels[sel] > 0).any() for i, sel in batch):
                break
        else:
            skipped += 1
            log.warning("iteration %d: %s", it, NoForegroundRoIs("no foreground RoIs after retries"))
            losses.append(np.nan)
            parts.append((np.nan, np.nan))
            if it + 1 in snap_at:
                saved[it + 1] = params.copy()
            continue
        total_rois = sum(len(sel) for _, sel in batch)
        grads: dict[str, np.ndarray] = {}
        loss = 0.0
        cls_l = loc_l = 0.0
        for i, sel in batch:
            if i not in cache:
                cache[i] = ds.load_image(i)
            lab = labeled[i]
            tgt = ((lab.targets[sel] - mean) / std).astype(params.dtype)
            l, g, (c, r) = forward_loss(params, cache[i], lab.rois[sel], lab.labels[sel], tgt,
                                        cfg.lam, normalizer=total_rois)
            loss += l
            cls_l += c
            loc_l += r
            for k, v in g.items():
                grads[k] = grads[k] + v if k in grads else v
        lr = learning_rate(cfg, it)
        for k, w in params.tensors.items():
            g = grads[k]
            if cfg.weight_decay and not k.endswith(".b"):
                g = g + cfg.weight_decay * w
            v = velocity[k]
            v *= cfg.momentum
            v -= (lr * g).astype(v.dtype)
            w += v
        losses.append(loss)
        parts.append((cls_l, loc_l))
        if it + 1 in snap_at:
            saved[it + 1] = params.copy()
        if progress is not None:
            progress(it, loss)
    return TrainResult(params, np.asarray(losses), skipped, np.asarray(parts), saved)


def smoothed(trace: np.ndarray, window: int = 50) -> np.ndarray:
    trace = np.asarray(trace, dtype=np.float64)
    trace = trace[np.isfinite(trace)]
    if len(trace) == 0:
        return trace
    window = max(1, min(window, len(trace)))
    kernel = np.ones(window) / window
    return np.convolve(trace, kernel, mode="valid")


# ----------------------------------------------------------------- gradient check

def _rel_error(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(0.5 * (abs(a) + abs(n)), floor)


def gradient_check(params: NetworkParams, batch, eps: float = 1e-4, samples_per_tensor: int = 6,
                   seed: int = 0, fault: dict[str, float] | None = None, lam: float = 1.0,
                   floor: float = 1e-6) -> float:
    """Max relative error between backprop and central differences.

    ``batch = (image, rois, labels, normalised_targets)``.  Runs in float64.
    Sampled coordinates whose +/-eps perturbation switches a ReLU, max or
    smooth-L1 branch are skipped.  ``fault`` scales the analytic gradient of
    named tensors (to confirm the check can fail).
    """
    image, rois, labels, targets = batch
    p = params.astype(np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.float64)
    _, grads, _ = forward_loss(p, image, rois, labels, targets, lam)
    if fault:
        grads = {k: v * fault.get(k, 1.0) for k, v in grads.items()}
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, tensor in p.tensors.items():
        flat = tensor.reshape(-1)
        g = grads[name].reshape(-1)
        picks = rng.choice(flat.size, min(samples_per_tensor, flat.size), replace=False)
        for j in picks:
            old = flat[j]
            flat[j] = old + eps
            sig_p = activation_signature(p, image, rois, labels, targets)
            lp = forward_loss(p, image, rois, labels, targets, lam, want_grads=False)[0]
            flat[j] = old - eps
            sig_m = activation_signature(p, image, rois, labels, targets)
            lm = forward_loss(p, image, rois, labels, targets, lam, want_grads=False)[0]
            flat[j] = old
            if sig_p != sig_m:
                continue
            num = (lp - lm) / (2 * eps)
            worst = max(worst, _rel_error(float(g[j]), num, floor))
    return worst
