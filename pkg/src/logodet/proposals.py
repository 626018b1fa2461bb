"""Class-agnostic region proposals by selective search.

An image is over-segmented with the Felzenszwalb-Huttenlocher graph method,
then adjacent regions are merged greedily by colour, texture, size and fill
similarity.  Every region ever formed contributes its bounding box.
"""
from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import kernels
from .boxes import iou_matrix

COLOR_BINS = 25
TEXTURE_BINS = 10
N_ORIENTATIONS = 8
SIMILARITY_COMPONENTS = ("color", "texture", "size", "fill")


class EmptyGroundTruth(ValueError):
    pass


@dataclass(frozen=True)
class RegionProposal:
    box: tuple[int, int, int, int]
    rank: int


@dataclass(frozen=True)
class ProposalParams:
    k: float = 100.0
    min_size: int = 20
    sigma: float = 0.8
    color_spaces: tuple[str, ...] = ("rgb",)
    ks: tuple[float, ...] = ()
    multi_strategy: bool = False
    top_k: int = 2000
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "color_spaces", tuple(self.color_spaces))
        object.__setattr__(self, "ks", tuple(self.ks))
        if self.k <= 0 or any(k <= 0 for k in self.ks):
            raise ValueError("segmentation threshold k must be positive")
        if self.min_size < 1:
            raise ValueError("min_size must be >= 1")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if not self.color_spaces:
            raise ValueError("need at least one colour space")
        for cs in self.color_spaces:
            if cs not in _COLOR_SPACES:
                raise ValueError(f"unknown colour space {cs!r}")

    def strategies(self) -> list[tuple[str, float]]:
        if not self.multi_strategy:
            return [(self.color_spaces[0], self.k)]
        ks = self.ks or (self.k,)
        return [(cs, k) for cs in self.color_spaces for k in ks]


# ------------------------------------------------------------- segmentation

def _edges(img: np.ndarray):
    H, W = img.shape[:2]
    idx = np.arange(H * W).reshape(H, W)
    pairs = [
        (idx[:, :-1], idx[:, 1:], img[:, :-1], img[:, 1:]),
        (idx[:-1, :], idx[1:, :], img[:-1, :], img[1:, :]),
        (idx[:-1, :-1], idx[1:, 1:], img[:-1, :-1], img[1:, 1:]),
        (idx[1:, :-1], idx[:-1, 1:], img[1:, :-1], img[:-1, 1:]),
    ]
    src = np.concatenate([p[0].ravel() for p in pairs]).astype(np.int64)
    dst = np.concatenate([p[1].ravel() for p in pairs]).astype(np.int64)
    w = np.concatenate([np.sqrt(((p[2] - p[3]) ** 2).sum(-1)).ravel() for p in pairs])
    return src, dst, w


def canonical_labels(roots: np.ndarray) -> np.ndarray:
    """Renumber component ids 0..n-1 in raster order of first appearance."""
    _, first, inverse = np.unique(roots, return_index=True, return_inverse=True)
    relabel = np.empty(len(first), dtype=np.int64)
    relabel[np.argsort(first, kind="stable")] = np.arange(len(first))
    return relabel[inverse.ravel()]


def segment(image: np.ndarray, k: float, min_size: int, sigma: float = 0.0) -> np.ndarray:
    """Graph-based over-segmentation; returns an ``(H, W)`` int label map."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    if img.size == 0:
        raise ValueError("empty image")
    if sigma > 0:
        img = ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0))
    H, W = img.shape[:2]
    src, dst, w = _edges(img)
    order = np.argsort(w, kind="stable")
    roots = kernels.segment_graph(
        H * W,
        np.ascontiguousarray(src[order]),
        np.ascontiguousarray(dst[order]),
        np.ascontiguousarray(w[order]),
        float(k),
        int(min_size),
    )
    return canonical_labels(np.asarray(roots)).reshape(H, W)


# ------------------------------------------------------------- features

def _rgb(img):
    return img


def _hsv(img):
    from skimage.color import rgb2hsv

    return rgb2hsv(img / 255.0) * 255.0


def _lab(img):
    from skimage.color import rgb2lab

    lab = rgb2lab(img / 255.0)
    return np.stack([lab[..., 0] * 2.55, lab[..., 1] + 128, lab[..., 2] + 128], -1)


_COLOR_SPACES = {"rgb": _rgb, "hsv": _hsv, "lab": _lab}


@dataclass
class RegionFeatures:
    size: int
    bbox: tuple[int, int, int, int]
    color_hist: np.ndarray = field(repr=False)
    texture_hist: np.ndarray = field(repr=False)


def _region_histograms(values: np.ndarray, labels: np.ndarray, n_regions: int, bins: int,
                       lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """L1-normalised per-region histograms over the trailing channel axis."""
    C = values.shape[-1]
    flat_labels = labels.ravel()
    hist = np.zeros((n_regions, C * bins))
    for c in range(C):
        span = max(hi[c] - lo[c], 1e-12)
        b = np.clip(((values[..., c].ravel() - lo[c]) / span * bins).astype(np.int64), 0, bins - 1)
        hist[:, c * bins:(c + 1) * bins] = np.bincount(
            flat_labels * bins + b, minlength=n_regions * bins
        ).reshape(n_regions, bins)
    hist /= np.maximum(hist.sum(axis=1, keepdims=True), 1e-12)
    return hist


def _texture_responses(img: np.ndarray) -> np.ndarray:
    out = []
    for c in range(img.shape[-1]):
        gy = ndimage.gaussian_filter(img[..., c], sigma=1.0, order=(1, 0))
        gx = ndimage.gaussian_filter(img[..., c], sigma=1.0, order=(0, 1))
        for o in range(N_ORIENTATIONS):
            th = o * np.pi * 2 / N_ORIENTATIONS
            out.append(np.maximum(gx * np.cos(th) + gy * np.sin(th), 0.0))
    return np.stack(out, axis=-1)


def region_features(image: np.ndarray, labels: np.ndarray) -> list[RegionFeatures]:
    img = np.asarray(image, dtype=np.float64)
    n = int(labels.max()) + 1
    sizes = np.bincount(labels.ravel(), minlength=n)
    color = _region_histograms(img, labels, n, COLOR_BINS, np.zeros(img.shape[-1]),
                               np.full(img.shape[-1], 256.0))
    tex_resp = _texture_responses(img)
    tex = _region_histograms(tex_resp, labels, n, TEXTURE_BINS, np.zeros(tex_resp.shape[-1]),
                             tex_resp.reshape(-1, tex_resp.shape[-1]).max(axis=0))
    slices = ndimage.find_objects(labels + 1)
    feats = []
    for i, sl in enumerate(slices):
        ys, xs = sl
        feats.append(RegionFeatures(int(sizes[i]), (xs.start, ys.start, xs.stop, ys.stop), color[i], tex[i]))
    return feats


def similarity_components(r1: RegionFeatures, r2: RegionFeatures, image_size: int):
    """``(color, texture, size, fill)`` similarities, each in [0, 1]."""
    s_color = float(np.minimum(r1.color_hist, r2.color_hist).sum())
    s_tex = float(np.minimum(r1.texture_hist, r2.texture_hist).sum())
    s_size = 1.0 - (r1.size + r2.size) / image_size
    x0 = min(r1.bbox[0], r2.bbox[0])
    y0 = min(r1.bbox[1], r2.bbox[1])
    x1 = max(r1.bbox[2], r2.bbox[2])
    y1 = max(r1.bbox[3], r2.bbox[3])
    s_fill = 1.0 - ((x1 - x0) * (y1 - y0) - r1.size - r2.size) / image_size
    clip = lambda v: min(1.0, max(0.0, v))  # noqa: E731
    return clip(s_color), clip(s_tex), clip(s_size), clip(s_fill)


def region_similarity(r1: RegionFeatures, r2: RegionFeatures, image_size: int,
                      components: Sequence[str] = SIMILARITY_COMPONENTS) -> float:
    parts = dict(zip(SIMILARITY_COMPONENTS, similarity_components(r1, r2, image_size)))
    return float(sum(parts[c] for c in components))


def merge_features(a: RegionFeatures, b: RegionFeatures) -> RegionFeatures:
    size = a.size + b.size
    return RegionFeatures(
        size,
        (min(a.bbox[0], b.bbox[0]), min(a.bbox[1], b.bbox[1]),
         max(a.bbox[2], b.bbox[2]), max(a.bbox[3], b.bbox[3])),
        (a.color_hist * a.size + b.color_hist * b.size) / size,
        (a.texture_hist * a.size + b.texture_hist * b.size) / size,
    )


def adjacency(labels: np.ndarray) -> np.ndarray:
    """Unique ``(i, j)`` pairs, ``i < j``, of 8-connected neighbouring regions."""
    pairs = [
        (labels[:, :-1], labels[:, 1:]),
        (labels[:-1, :], labels[1:, :]),
        (labels[:-1, :-1], labels[1:, 1:]),
        (labels[1:, :-1], labels[:-1, 1:]),
    ]
    a = np.concatenate([p[0].ravel() for p in pairs])
    b = np.concatenate([p[1].ravel() for p in pairs])
    keep = a != b
    lo = np.minimum(a[keep], b[keep])
    hi = np.maximum(a[keep], b[keep])
    n = int(labels.max()) + 1
    codes = np.unique(lo.astype(np.int64) * n + hi)
    return np.stack([codes // n, codes % n], axis=1)


def hierarchical_grouping(feats: list[RegionFeatures], pairs: np.ndarray, image_size: int,
                          components: Sequence[str] = SIMILARITY_COMPONENTS):
    """Greedily merge the most similar adjacent pair until one region remains.

    Returns ``(regions, merges)``: all regions in creation order and the
    ``(i, j, new)`` merge log.  Ties go to the lexicographically smallest pair.
    """
    regions = list(feats)
    neighbours: list[set[int]] = [set() for _ in regions]
    heap = []
    for i, j in pairs.tolist():
        neighbours[i].add(j)
        neighbours[j].add(i)
        heap.append((-region_similarity(regions[i], regions[j], image_size, components), i, j))
    heapq.heapify(heap)
    alive = [True] * len(regions)
    merges = []
    while heap:
        _, i, j = heapq.heappop(heap)
        if not (alive[i] and alive[j]):
            continue
        t = len(regions)
        regions.append(merge_features(regions[i], regions[j]))
        alive[i] = alive[j] = False
        alive.append(True)
        nb = (neighbours[i] | neighbours[j]) - {i, j}
        neighbours.append(nb)
        for n in sorted(nb):
            neighbours[n].discard(i)
            neighbours[n].discard(j)
            neighbours[n].add(t)
            heapq.heappush(heap, (-region_similarity(regions[t], regions[n], image_size, components), n, t))
        merges.append((i, j, t))
    return regions, merges


def _strategy_proposals(image: np.ndarray, color_space: str, k: float, params: ProposalParams,
                        rng: np.random.Generator):
    converted = _COLOR_SPACES[color_space](np.asarray(image, dtype=np.float64))
    labels = segment(converted, k, params.min_size, params.sigma)
    feats = region_features(converted, labels)
    regions, _ = hierarchical_grouping(feats, adjacency(labels), labels.size)
    n = len(regions)
    boxes = np.array([r.bbox for r in regions], dtype=np.int64)
    # last-created region sits at hierarchy position 1
    position = n - np.arange(n)
    return boxes, rng.random(n) * position


def selective_search(image: np.ndarray, params: ProposalParams = ProposalParams()) -> list[RegionProposal]:
    boxes = selective_search_boxes(image, params)
    return [RegionProposal(tuple(int(v) for v in b), r) for r, b in enumerate(boxes)]


def selective_search_boxes(image: np.ndarray, params: ProposalParams = ProposalParams()) -> np.ndarray:
    """Ranked, deduplicated ``(N, 4)`` int array of proposal boxes (N <= top_k)."""
    image = np.asarray(image)
    if image.size == 0:
        raise ValueError("empty image")
    rng = np.random.default_rng(params.seed)
    all_boxes = []
    all_scores = []
    for cs, k in params.strategies():
        b, s = _strategy_proposals(image, cs, k, params, rng)
        all_boxes.append(b)
        all_scores.append(s)
    boxes = np.concatenate(all_boxes)
    scores = np.concatenate(all_scores)
    order = np.argsort(scores, kind="stable")
    boxes = boxes[order]
    _, first = np.unique(boxes, axis=0, return_index=True)
    boxes = boxes[np.sort(first)]
    return boxes[: params.top_k]


def proposal_recall(proposals: Sequence[np.ndarray], gt_boxes: Sequence[np.ndarray],
                    iou_threshold: float = 0.5, top_k: int | None = None) -> float:
    """Fraction of ground-truth boxes covered by some proposal at ``iou_threshold``."""
    if not 0 < iou_threshold <= 1:
        raise ValueError("iou_threshold must be in (0, 1]")
    if len(proposals) != len(gt_boxes):
        raise ValueError("proposals and ground truth are not aligned")
    n_gt = 0
    hit = 0
    for props, gts in zip(proposals, gt_boxes):
        gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
        props = np.asarray(props, dtype=np.float64).reshape(-1, 4)
        if top_k is not None:
            props = props[:top_k]
        n_gt += len(gts)
        if len(gts) and len(props):
            hit += int((iou_matrix(gts, props).max(axis=1) >= iou_threshold).sum())
    if n_gt == 0:
        raise EmptyGroundTruth("recall is undefined without ground-truth boxes")
    return hit / n_gt


def write_proposals(path, images: Sequence[str], proposals: Sequence[np.ndarray]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for name, boxes in zip(images, proposals):
            rec = {"image": name, "boxes": np.asarray(boxes).astype(int).tolist()}
            fh.write(json.dumps(rec) + "\n")


def read_proposals(path) -> dict[str, np.ndarray]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out[rec["image"]] = np.asarray(rec["boxes"], dtype=np.int64).reshape(-1, 4)
    return out
