"""Annotation files, dataset splits and summary statistics.

On-disk layout of a dataset root::

    classes.tsv            logo-class-name <TAB> brand-name, one row per class
    annotations.jsonl      one JSON object per image
    annotations.<s>.jsonl  optional named subsets written by :func:`save_split`
    images/...             8-bit RGB PNGs referenced by relative path

An annotation line looks like
``{"image": "images/000001.png", "width": 256, "height": 256,
"objects": [{"bbox": [x0, y0, x1, y1], "cls": "nike-1"}]}``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .boxes import BoundingBox, BrandMap, InvalidBox

CLASSES_FILE = "classes.tsv"
ANNOTATIONS_FILE = "annotations.jsonl"


class ParseError(ValueError):
    pass


class ValidationError(ValueError):
    pass


class InvalidFractions(ValueError):
    pass


@dataclass(frozen=True)
class Annotation:
    image_path: str
    width: int
    height: int
    objects: tuple[tuple[BoundingBox, int], ...] = ()

    @property
    def boxes(self) -> np.ndarray:
        if not self.objects:
            return np.zeros((0, 4))
        return np.array([b.as_tuple() for b, _ in self.objects], dtype=np.float64)

    @property
    def labels(self) -> np.ndarray:
        return np.array([c for _, c in self.objects], dtype=np.int64)


@dataclass
class Dataset:
    annotations: list[Annotation]
    brand_map: BrandMap
    # where relative image paths resolve; not part of dataset identity
    root: Path | None = field(default=None, compare=False)
    # in-memory pixels keyed by image_path (synthesised, not yet written)
    images: dict[str, np.ndarray] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        self.validate()

    def __len__(self) -> int:
        return len(self.annotations)

    @property
    def n_classes(self) -> int:
        return self.brand_map.n_classes

    def validate(self) -> None:
        seen = set()
        for ann in self.annotations:
            if ann.image_path in seen:
                raise ValidationError(f"duplicate image path {ann.image_path!r}")
            seen.add(ann.image_path)
            _check_annotation(ann, self.brand_map.n_classes)

    def load_image(self, index: int) -> np.ndarray:
        ann = self.annotations[index]
        if ann.image_path in self.images:
            return self.images[ann.image_path]
        if self.root is None:
            raise FileNotFoundError(f"no root to resolve {ann.image_path!r}")
        with Image.open(self.root / ann.image_path) as im:
            return np.asarray(im.convert("RGB"))

    def subset(self, indices: Iterable[int]) -> "Dataset":
        anns = [self.annotations[i] for i in indices]
        imgs = {a.image_path: self.images[a.image_path] for a in anns if a.image_path in self.images}
        return Dataset(anns, self.brand_map, root=self.root, images=imgs)


def _check_annotation(ann: Annotation, n_classes: int) -> None:
    if ann.width <= 0 or ann.height <= 0:
        raise ValidationError(f"{ann.image_path}: non-positive image size")
    for box, cls in ann.objects:
        if not box.inside(ann.width, ann.height):
            raise ValidationError(
                f"{ann.image_path}: box {box.as_tuple()} outside image {ann.width}x{ann.height}"
            )
        if not 1 <= cls <= n_classes:
            raise ValidationError(f"{ann.image_path}: class id {cls} not in class table")


def read_class_table(path: Path) -> BrandMap:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise ParseError(f"{path}:{lineno}: expected 'logo-class<TAB>brand'")
            rows.append((parts[0], parts[1]))
    try:
        return BrandMap.from_pairs(rows)
    except ValueError as exc:
        raise ValidationError(f"{path}: {exc}") from exc


def write_class_table(path: Path, brand_map: BrandMap) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for c, name in enumerate(brand_map.class_names, 1):
            fh.write(f"{name}\t{brand_map.brand_names[brand_map.brand_of(c)]}\n")


def _parse_annotation(obj, brand_map: BrandMap, where: str) -> Annotation:
    try:
        image = obj["image"]
        width = obj["width"]
        height = obj["height"]
        raw_objects = obj.get("objects", [])
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{where}: missing field {exc}") from exc
    if not isinstance(image, str) or not isinstance(width, int) or not isinstance(height, int):
        raise ParseError(f"{where}: 'image' must be a string, 'width'/'height' integers")
    objects = []
    for o in raw_objects:
        try:
            bbox = o["bbox"]
            name = o["cls"]
            if len(bbox) != 4:
                raise ParseError(f"{where}: bbox needs 4 numbers")
            box = BoundingBox.from_seq(bbox)
        except InvalidBox as exc:
            raise ValidationError(f"{where}: {image}: {exc}") from exc
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{where}: bad object entry {o!r}") from exc
        if name not in brand_map.class_names:
            raise ValidationError(f"{where}: {image}: unknown logo class {name!r}")
        objects.append((box, brand_map.class_id(name)))
    ann = Annotation(image, width, height, tuple(objects))
    try:
        _check_annotation(ann, brand_map.n_classes)
    except ValidationError as exc:
        raise ValidationError(f"{where}: {exc}") from exc
    return ann


def annotations_file(split: str | None) -> str:
    return ANNOTATIONS_FILE if split is None else f"annotations.{split}.jsonl"


def load_dataset(root, split: str | None = None) -> Dataset:
    root = Path(root)
    brand_map = read_class_table(root / CLASSES_FILE)
    path = root / annotations_file(split)
    annotations = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{where}: {exc.msg}") from exc
            annotations.append(_parse_annotation(obj, brand_map, where))
    try:
        return Dataset(annotations, brand_map, root=root)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from exc


def annotation_record(ann: Annotation, brand_map: BrandMap) -> dict:
    return {
        "image": ann.image_path,
        "width": ann.width,
        "height": ann.height,
        "objects": [
            {"bbox": list(box.as_tuple()), "cls": brand_map.class_name(c)} for box, c in ann.objects
        ],
    }


def _write_annotations(path: Path, ds: Dataset) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ann in ds.annotations:
            fh.write(json.dumps(annotation_record(ann, ds.brand_map), ensure_ascii=False) + "\n")


def save_dataset(ds: Dataset, root) -> None:
    """Write class table, annotations and any in-memory images under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    write_class_table(root / CLASSES_FILE, ds.brand_map)
    _write_annotations(root / ANNOTATIONS_FILE, ds)
    for rel, pixels in ds.images.items():
        out = root / rel
        out.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="RGB").save(out, optimize=False)


def save_split(ds: Dataset, root, split: str) -> None:
    """Write ``ds`` as the named subset ``annotations.<split>.jsonl`` of an existing root."""
    _write_annotations(Path(root) / annotations_file(split), ds)


def split_sizes(n: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise InvalidFractions(f"fractions {tuple(fractions)} must be 3 non-negative values summing to 1")
    # tolerance absorbs products like 10 * 0.7 = 6.999999...
    n_train = min(n, int(math.floor(n * fractions[0] + 1e-9)))
    n_val = min(n - n_train, int(math.floor(n * fractions[1] + 1e-9)))
    return n_train, n_val, n - n_train - n_val


def split_dataset(ds: Dataset, fractions=(0.5, 0.2, 0.3), seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Random image-level partition; floor sizes for train/val, remainder to test."""
    n_train, n_val, _ = split_sizes(len(ds), fractions)
    order = np.random.default_rng(seed).permutation(len(ds))
    parts = (order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :])
    return tuple(ds.subset(sorted(p.tolist())) for p in parts)


@dataclass
class Stats:
    n_images: int
    n_objects: int
    class_counts: dict[str, int]
    brand_image_counts: dict[str, int]
    mean_width: float
    mean_height: float

    @property
    def n_classes(self) -> int:
        return len(self.class_counts)

    @property
    def n_brands(self) -> int:
        return len(self.brand_image_counts)


def dataset_stats(ds: Dataset) -> Stats:
    bm = ds.brand_map
    class_counts = np.zeros(bm.n_classes, dtype=np.int64)
    brand_images = np.zeros(bm.n_brands, dtype=np.int64)
    widths = 0
    heights = 0
    for ann in ds.annotations:
        widths += ann.width
        heights += ann.height
        brands = set()
        for _, c in ann.objects:
            class_counts[c - 1] += 1
            brands.add(bm.brand_of(c))
        for b in brands:
            brand_images[b] += 1
    n = len(ds)
    return Stats(
        n_images=n,
        n_objects=int(class_counts.sum()),
        class_counts={name: int(class_counts[i]) for i, name in enumerate(bm.class_names)},
        brand_image_counts={name: int(brand_images[i]) for i, name in enumerate(bm.brand_names)},
        mean_width=widths / n if n else 0.0,
        mean_height=heights / n if n else 0.0,
    )


def write_stats_csv(stats: Stats, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "name", "value"])
        w.writerow(["total", "images", stats.n_images])
        w.writerow(["total", "objects", stats.n_objects])
        w.writerow(["total", "logo_classes", stats.n_classes])
        w.writerow(["total", "brands", stats.n_brands])
        w.writerow(["total", "mean_width", f"{stats.mean_width:.3f}"])
        w.writerow(["total", "mean_height", f"{stats.mean_height:.3f}"])
        for name, count in stats.class_counts.items():
            w.writerow(["class_objects", name, count])
        for name, count in stats.brand_image_counts.items():
            w.writerow(["brand_images", name, count])


def relpath_for(index: int) -> str:
    return f"images/{index:06d}.png"
