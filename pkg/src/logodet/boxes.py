"""Geometric and label types shared by the whole pipeline.

Boxes use half-open pixel coordinates: a box ``(x0, y0, x1, y1)`` covers
``[x0, x1) x [y0, y1)``, so its width is simply ``x1 - x0``.  Class index 0
is background; logo classes are numbered ``1..C``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np


class InvalidBox(ValueError):
    pass


class DegenerateBox(ValueError):
    """A decoded box lost all of its area when clipped to the image."""


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        vals = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidBox(f"non-finite box {vals}")
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise InvalidBox(f"box {vals} has non-positive area")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x_min + 0.5 * self.width, self.y_min + 0.5 * self.height)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def inside(self, width: float, height: float) -> bool:
        return self.x_min >= 0 and self.y_min >= 0 and self.x_max <= width and self.y_max <= height

    def translate(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    @classmethod
    def from_seq(cls, seq: Sequence[float]) -> "BoundingBox":
        x0, y0, x1, y1 = seq
        return cls(float(x0), float(y0), float(x1), float(y1))


class RegressionTarget(NamedTuple):
    tx: float
    ty: float
    tw: float
    th: float


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    cls: int
    score: float

    def __post_init__(self):
        if self.cls < 1:
            raise ValueError("detections never carry the background class")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class BrandMap:
    """Logo-class to brand mapping plus the name tables of both.

    ``class_to_brand[c - 1]`` is the brand index of logo class ``c``.
    """

    class_names: tuple[str, ...]
    brand_names: tuple[str, ...]
    class_to_brand: tuple[int, ...]

    def __post_init__(self):
        if len(self.class_to_brand) != len(self.class_names):
            raise ValueError("brand map must be total on the logo classes")
        if len(set(self.class_names)) != len(self.class_names):
            raise ValueError("duplicate logo class names")
        if len(set(self.brand_names)) != len(self.brand_names):
            raise ValueError("duplicate brand names")
        used = set(self.class_to_brand)
        if any(b < 0 or b >= len(self.brand_names) for b in used):
            raise ValueError("brand index out of range")
        if used != set(range(len(self.brand_names))):
            raise ValueError("every brand needs at least one logo class")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def n_brands(self) -> int:
        return len(self.brand_names)

    def brand_of(self, cls: int) -> int:
        if not 1 <= cls <= self.n_classes:
            raise KeyError(cls)
        return self.class_to_brand[cls - 1]

    def class_id(self, name: str) -> int:
        return self.class_names.index(name) + 1

    def class_name(self, cls: int) -> str:
        return self.class_names[cls - 1]

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[str, str]]) -> "BrandMap":
        """Build from ``(logo_class, brand)`` rows; brands are numbered by first appearance."""
        brands: list[str] = []
        mapping = []
        for _, brand in pairs:
            if brand not in brands:
                brands.append(brand)
            mapping.append(brands.index(brand))
        return cls(tuple(p[0] for p in pairs), tuple(brands), tuple(mapping))


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two ``(N, 4)`` and ``(M, 4)`` box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def bbox_encode(proposal: BoundingBox, gt: BoundingBox) -> RegressionTarget:
    pcx, pcy = proposal.center
    gcx, gcy = gt.center
    pw, ph = proposal.width, proposal.height
    return RegressionTarget(
        (gcx - pcx) / pw,
        (gcy - pcy) / ph,
        math.log(gt.width / pw),
        math.log(gt.height / ph),
    )


def bbox_decode(proposal: BoundingBox, t: Sequence[float], image_size: tuple[int, int]) -> BoundingBox:
    """Apply regression offsets to ``proposal`` and clip to ``image_size = (width, height)``.

    Raises DegenerateBox when clipping leaves no area.
    """
    out = decode_boxes(np.asarray([proposal.as_tuple()]), np.asarray([t], dtype=np.float64), image_size)[0]
    if not (out[2] > out[0] and out[3] > out[1]):
        raise DegenerateBox(f"decoded box {tuple(out)} is empty inside the image")
    return BoundingBox.from_seq(out)


def encode_boxes(proposals: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Vectorised :func:`bbox_encode` over aligned ``(N, 4)`` arrays."""
    p = np.asarray(proposals, dtype=np.float64)
    g = np.asarray(gts, dtype=np.float64)
    pw = p[:, 2] - p[:, 0]
    ph = p[:, 3] - p[:, 1]
    gw = g[:, 2] - g[:, 0]
    gh = g[:, 3] - g[:, 1]
    return np.stack(
        [
            ((g[:, 0] + 0.5 * gw) - (p[:, 0] + 0.5 * pw)) / pw,
            ((g[:, 1] + 0.5 * gh) - (p[:, 1] + 0.5 * ph)) / ph,
            np.log(gw / pw),
            np.log(gh / ph),
        ],
        axis=1,
    )


# exp() overflow guard; loose enough that any in-image box round-trips
_MAX_LOG_SCALE = math.log(1e6)


def decode_boxes(proposals: np.ndarray, deltas: np.ndarray, image_size: tuple[int, int]) -> np.ndarray:
    """Vectorised decode + clip. Degenerate rows are returned as-is (zero area)."""
    p = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    pw = p[:, 2] - p[:, 0]
    ph = p[:, 3] - p[:, 1]
    cx = p[:, 0] + 0.5 * pw + d[:, 0] * pw
    cy = p[:, 1] + 0.5 * ph + d[:, 1] * ph
    w = pw * np.exp(np.minimum(d[:, 2], _MAX_LOG_SCALE))
    h = ph * np.exp(np.minimum(d[:, 3], _MAX_LOG_SCALE))
    width, height = image_size
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    out[:, 0::2] = np.clip(out[:, 0::2], 0, width)
    out[:, 1::2] = np.clip(out[:, 1::2], 0, height)
    return out


def valid_rows(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes).reshape(-1, 4)
    return (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
