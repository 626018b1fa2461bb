"""Per-RoI head outputs -> final detections (decode, threshold, per-class NMS)."""
from __future__ import annotations

import json
from typing import Iterable, Sequence

import numpy as np

from .boxes import BoundingBox, BrandMap, Detection, decode_boxes, iou_matrix, valid_rows

DEFAULT_SCORE_THRESHOLD = 0.05
DEFAULT_NMS_IOU = 0.3


def decode_detections(proposals: np.ndarray, probs: np.ndarray, offsets: np.ndarray,
                      score_threshold: float = DEFAULT_SCORE_THRESHOLD,
                      image_size: tuple[int, int] = (0, 0)) -> list[Detection]:
    """One candidate per (RoI, logo class) whose probability clears the threshold.

    Boxes are regressed with that class's offsets and clipped to
    ``image_size = (width, height)``; boxes left without area are dropped.
    """
    props = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    probs = np.asarray(probs, dtype=np.float64)
    if len(props) == 0:
        return []
    n_cls = probs.shape[1] - 1
    offs = np.asarray(offsets, dtype=np.float64).reshape(len(props), n_cls, 4)
    r_idx, c_idx = np.nonzero(probs[:, 1:] >= score_threshold)
    if len(r_idx) == 0:
        return []
    boxes = decode_boxes(props[r_idx], offs[r_idx, c_idx], image_size)
    ok = valid_rows(boxes)
    out = []
    for b, r, c in zip(boxes[ok], r_idx[ok], c_idx[ok]):
        score = float(min(1.0, max(0.0, probs[r, c + 1])))
        out.append(Detection(BoundingBox.from_seq(b), int(c) + 1, score))
    return out


def _order(dets: Sequence[Detection]) -> list[int]:
    # score descending, then coordinates ascending, for a total deterministic order
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].box.as_tuple()))


def nms(detections: Sequence[Detection], iou_threshold: float = DEFAULT_NMS_IOU,
        max_per_image: int | None = None) -> list[Detection]:
    """Greedy per-class suppression of boxes overlapping a kept box by IoU >= threshold."""
    if not 0 < iou_threshold <= 1:
        raise ValueError("iou_threshold must be in (0, 1]")
    dets = list(detections)
    kept: list[Detection] = []
    for cls in sorted({d.cls for d in dets}):
        group = [d for d in dets if d.cls == cls]
        order = _order(group)
        boxes = np.array([group[i].box.as_tuple() for i in order])
        ious = iou_matrix(boxes, boxes)
        alive = np.ones(len(order), dtype=bool)
        for a in range(len(order)):
            if not alive[a]:
                continue
            kept.append(group[order[a]])
            alive[a + 1:] &= ious[a, a + 1:] < iou_threshold
    kept = [kept[i] for i in _order(kept)]
    if max_per_image is not None:
        kept = kept[:max_per_image]
    return kept


def postprocess(proposals, probs, offsets, image_size, score_threshold=DEFAULT_SCORE_THRESHOLD,
                nms_iou=DEFAULT_NMS_IOU, max_per_image: int | None = 100) -> list[Detection]:
    return nms(decode_detections(proposals, probs, offsets, score_threshold, image_size), nms_iou, max_per_image)


def detection_record(image: str, dets: Iterable[Detection], brand_map: BrandMap) -> dict:
    return {
        "image": image,
        "detections": [
            {"bbox": [round(v, 4) for v in d.box.as_tuple()], "cls": brand_map.class_name(d.cls),
             "score": round(d.score, 6)}
            for d in dets
        ],
    }


def write_detections(path, images: Sequence[str], detections: Sequence[Sequence[Detection]],
                     brand_map: BrandMap) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for name, dets in zip(images, detections):
            fh.write(json.dumps(detection_record(name, dets, brand_map), ensure_ascii=False) + "\n")


def read_detections(path, brand_map: BrandMap) -> dict[str, list[Detection]]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out[rec["image"]] = [
                Detection(BoundingBox.from_seq(d["bbox"]), brand_map.class_id(d["cls"]), float(d["score"]))
                for d in rec["detections"]
            ]
    return out
