"""Brand recognition as a reduction over logo detections.

A brand owns several logo classes; an image's score for a brand is the best
detection score among that brand's logos.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .boxes import BrandMap, Detection
from .dataset import Annotation


class UnknownClass(KeyError):
    pass


class MultiBrandImage(ValueError):
    pass


@dataclass(frozen=True)
class BrandPrediction:
    scores: np.ndarray
    decision: int | None
    decision_score: float


def brand_scores(detections: Sequence[Detection], brand_map: BrandMap, aggregate: str = "max") -> np.ndarray:
    """Per-brand score vector. ``aggregate='sum'`` adds scores instead, capped at 1."""
    scores = np.zeros(brand_map.n_brands)
    for d in detections:
        if not 1 <= d.cls <= brand_map.n_classes:
            raise UnknownClass(d.cls)
        b = brand_map.brand_of(d.cls)
        if aggregate == "max":
            scores[b] = max(scores[b], d.score)
        elif aggregate == "sum":
            scores[b] += d.score
        else:
            raise ValueError(f"unknown aggregate {aggregate!r}")
    return np.minimum(scores, 1.0)


def predict_brand(scores: np.ndarray, min_score: float = 0.0) -> int | None:
    """Arg-max brand (lowest index on ties), or None below ``min_score``."""
    if not 0 <= min_score <= 1:
        raise ValueError("min_score must be in [0, 1]")
    scores = np.asarray(scores)
    if len(scores) == 0:
        return None
    best = int(np.argmax(scores))
    if scores[best] < min_score:
        return None
    return best


def recognise(detections: Sequence[Detection], brand_map: BrandMap, min_score: float = 0.0,
              aggregate: str = "max") -> BrandPrediction:
    s = brand_scores(detections, brand_map, aggregate)
    d = predict_brand(s, min_score)
    return BrandPrediction(s, d, float(s[d]) if d is not None else 0.0)


def image_brand(ann: Annotation, brand_map: BrandMap) -> int:
    """Ground-truth brand of a single-brand image."""
    brands = {brand_map.brand_of(c) for _, c in ann.objects}
    if len(brands) != 1:
        raise MultiBrandImage(f"{ann.image_path}: brand evaluation needs exactly one brand, found {len(brands)}")
    return brands.pop()


def write_brand_csv(path, images: Sequence[str], predictions: Sequence[BrandPrediction],
                    brand_map: BrandMap) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image", "brand", "score", *brand_map.brand_names])
        for name, p in zip(images, predictions):
            label = brand_map.brand_names[p.decision] if p.decision is not None else ""
            w.writerow([name, label, f"{p.decision_score:.6f}", *(f"{v:.6f}" for v in p.scores)])
