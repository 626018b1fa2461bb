"""Detection and brand-recognition metrics: greedy matching, AP/mAP,
accuracy (micro and macro) and one-vs-rest ROC AUC.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .boxes import BrandMap, Detection, iou_matrix
from .dataset import Dataset

log = logging.getLogger(__name__)


class NoGroundTruth(ValueError):
    pass


class LabelMismatch(ValueError):
    pass


class DegenerateClass(ValueError):
    pass


def match_detections(boxes: np.ndarray, scores: np.ndarray, gts: np.ndarray,
                     iou_threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Greedy TP/FP assignment for one class in one image.

    Detections are visited by descending score (stable); each claims the
    highest-IoU ground truth that is still unmatched, if that IoU reaches the
    threshold.  Returns ``(order, is_tp)`` with ``is_tp[k]`` for ``order[k]``.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-scores, kind="stable")
    tp = np.zeros(len(order), dtype=bool)
    if len(gts) == 0 or len(boxes) == 0:
        return order, tp
    ious = iou_matrix(boxes[order], gts)
    free = np.ones(len(gts), dtype=bool)
    for k in range(len(order)):
        cand = np.where(free, ious[k], -1.0)
        j = int(np.argmax(cand))
        if cand[j] >= iou_threshold:
            tp[k] = True
            free[j] = False
    return order, tp


def average_precision(scores: np.ndarray, tp: np.ndarray, n_gt: int, interpolation: str = "all") -> float:
    """Area under the precision-monotone PR curve of a score-ranked TP/FP list.

    ``interpolation='all'`` integrates over every recall step; ``'11point'``
    averages the interpolated precision at recall 0, 0.1, ..., 1.
    """
    if n_gt < 1:
        raise NoGroundTruth("average precision needs at least one ground-truth object")
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    tp = np.asarray(tp, dtype=bool).reshape(-1)
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = tp[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    if interpolation == "11point":
        ap = 0.0
        for t in np.linspace(0, 1, 11):
            p = precision[recall >= t]
            ap += (p.max() if len(p) else 0.0) / 11
        return float(ap)
    if interpolation != "all":
        raise ValueError(f"unknown interpolation {interpolation!r}")
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def mean_ap(per_class: Mapping[object, float] | Sequence[float]) -> float:
    vals = list(per_class.values()) if isinstance(per_class, Mapping) else list(per_class)
    vals = [v for v in vals if v is not None and not np.isnan(v)]
    if not vals:
        raise NoGroundTruth("no class with ground truth")
    return float(np.mean(vals))


@dataclass
class DetectionEval:
    iou_threshold: float
    ap: dict[int, float]   # class id -> AP; classes without GT are absent
    n_gt: dict[int, int]

    @property
    def map(self) -> float:
        return mean_ap(self.ap)


def evaluate_detections(gt: Sequence[tuple[np.ndarray, np.ndarray]], detections: Sequence[Sequence[Detection]],
                        n_classes: int, iou_threshold: float = 0.5, interpolation: str = "all") -> DetectionEval:
    """Dataset-level per-class AP.

    ``gt[i] = (boxes, labels)`` and ``detections[i]`` describe image ``i``.
    Matching is per image; the PR curve is built from the global score order.
    """
    if len(gt) != len(detections):
        raise ValueError("ground truth and detections are not aligned")
    flags: dict[int, list] = {c: [] for c in range(1, n_classes + 1)}
    scores: dict[int, list] = {c: [] for c in range(1, n_classes + 1)}
    n_gt = {c: 0 for c in range(1, n_classes + 1)}
    for (gboxes, glabels), dets in zip(gt, detections):
        gboxes = np.asarray(gboxes, dtype=np.float64).reshape(-1, 4)
        glabels = np.asarray(glabels).reshape(-1)
        for c in range(1, n_classes + 1):
            g = gboxes[glabels == c]
            n_gt[c] += len(g)
            mine = [d for d in dets if d.cls == c]
            if not mine:
                continue
            b = np.array([d.box.as_tuple() for d in mine])
            s = np.array([d.score for d in mine])
            order, tp = match_detections(b, s, g, iou_threshold)
            flags[c].append(tp)
            scores[c].append(s[order])
    ap = {}
    for c in range(1, n_classes + 1):
        if n_gt[c] == 0:
            log.warning("class %d has no ground truth; excluded from mAP", c)
            continue
        s = np.concatenate(scores[c]) if scores[c] else np.zeros(0)
        f = np.concatenate(flags[c]) if flags[c] else np.zeros(0, dtype=bool)
        ap[c] = average_precision(s, f, n_gt[c], interpolation)
    return DetectionEval(iou_threshold, ap, {c: n for c, n in n_gt.items() if n})


def evaluate_dataset(ds: Dataset, detections: Sequence[Sequence[Detection]], iou_threshold: float = 0.5,
                     interpolation: str = "all") -> DetectionEval:
    gt = [(a.boxes, a.labels) for a in ds.annotations]
    return evaluate_detections(gt, detections, ds.n_classes, iou_threshold, interpolation)


@dataclass
class AccuracyReport:
    micro: float
    macro: float
    per_brand: dict[int, float]
    n: int


def brand_accuracy(predictions: Mapping[str, int | None], labels: Mapping[str, int]) -> AccuracyReport:
    """Image-level accuracy; a missing decision (None) counts as wrong."""
    if set(predictions) != set(labels):
        raise LabelMismatch("prediction and label image sets differ")
    if not labels:
        raise LabelMismatch("no labelled images")
    correct = 0
    per: dict[int, list[int]] = {}
    for img, y in labels.items():
        ok = predictions[img] is not None and predictions[img] == y
        correct += ok
        per.setdefault(y, [0, 0])
        per[y][0] += ok
        per[y][1] += 1
    per_brand = {b: c / n for b, (c, n) in sorted(per.items())}
    return AccuracyReport(correct / len(labels), float(np.mean(list(per_brand.values()))), per_brand, len(labels))


def binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Mann-Whitney AUC with average ranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateClass("AUC needs both positives and negatives")
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def brand_auc(scores: np.ndarray, labels: np.ndarray) -> tuple[float, dict[int, float]]:
    """Macro one-vs-rest AUC over brands present in ``labels``.

    ``scores``: (N, B) brand score vectors; ``labels``: (N,) brand ids.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    present = sorted(set(labels.tolist()))
    if len(present) < 2:
        raise DegenerateClass("AUC needs at least two brands in the labels")
    per = {}
    for b in range(scores.shape[1]):
        pos = labels == b
        if not pos.any():
            log.warning("brand %d has no positive images; skipped in AUC", b)
            continue
        per[b] = binary_auc(scores[:, b], pos)
    return float(np.mean(list(per.values()))), per


def write_ap_csv(path, ev: DetectionEval, brand_map: BrandMap) -> None:
    """Per-class AP table, one row, classes as columns."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cls = sorted(ev.ap)
        w.writerow(["iou", "mAP", *(brand_map.class_name(c) for c in cls)])
        w.writerow([f"{ev.iou_threshold:.2f}", f"{100 * ev.map:.2f}", *(f"{100 * ev.ap[c]:.2f}" for c in cls)])


def write_accuracy_csv(path, acc: AccuracyReport, auc: float | None, brand_map: BrandMap) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        brands = sorted(acc.per_brand)
        w.writerow(["accuracy_micro", "accuracy_macro", "auc", *(brand_map.brand_names[b] for b in brands)])
        w.writerow([f"{100 * acc.micro:.2f}", f"{100 * acc.macro:.2f}",
                    "" if auc is None else f"{100 * auc:.2f}",
                    *(f"{100 * acc.per_brand[b]:.2f}" for b in brands)])
