"""Synthetic logo scenes: procedurally drawn logo templates pasted onto
textured backgrounds under scale, rotation, shear, lighting, colour and
occlusion nuisances.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from .boxes import BoundingBox, BrandMap
from .dataset import Annotation, Dataset, relpath_for


class TemplateTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class SynthesisParams:
    scale_range: tuple[float, float] = (0.67, 1.33)
    rotation_range: tuple[float, float] = (-15.0, 15.0)
    shear_range: tuple[float, float] = (-0.1, 0.1)
    brightness_range: tuple[float, float] = (0.8, 1.2)
    color_jitter_range: tuple[float, float] = (0.9, 1.1)
    occlusion_range: tuple[float, float] = (0.0, 0.2)
    objects_per_image: tuple[int, int] = (1, 2)
    seed: int = 0
    # draw all logos of an image from one brand (brand-level ground truth stays single-label)
    single_brand: bool = True

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                object.__setattr__(self, f.name, tuple(v))
        for name in ("scale_range", "rotation_range", "shear_range", "brightness_range",
                     "color_jitter_range", "occlusion_range", "objects_per_image"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: empty range ({lo}, {hi})")
        if self.scale_range[0] <= 0:
            raise ValueError("scale_range must be positive")
        if self.brightness_range[0] < 0 or self.color_jitter_range[0] < 0:
            raise ValueError("lighting ranges must be non-negative")
        if not (0 <= self.occlusion_range[0] and self.occlusion_range[1] < 1):
            raise ValueError("occlusion_range must lie in [0, 1)")
        if self.objects_per_image[0] < 1:
            raise ValueError("need at least one object per image")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthesisParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synthesis keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "SynthesisParams":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass(frozen=True)
class Placement:
    """Geometric part of one paste; lighting and occlusion are drawn separately."""

    x: int
    y: int
    scale: float = 1.0
    rotation: float = 0.0
    shear: float = 0.0


def _affine(scale: float, rotation_deg: float, shear: float) -> np.ndarray:
    th = math.radians(rotation_deg)
    c, s = math.cos(th), math.sin(th)
    rot = np.array([[c, -s], [s, c]])
    sh = np.array([[1.0, shear], [0.0, 1.0]])
    return rot @ sh * scale


def footprint_hull(template_shape: tuple[int, int], scale: float, rotation: float, shear: float):
    """Axis-aligned extent of the transformed template rectangle, relative to its centre."""
    h, w = template_shape
    m = _affine(scale, rotation, shear)
    corners = np.array([[-w / 2, -h / 2], [w / 2, -h / 2], [w / 2, h / 2], [-w / 2, h / 2]])
    pts = corners @ m.T
    return pts.min(axis=0), pts.max(axis=0)


def render_logo(template: np.ndarray, placement: Placement, canvas_shape: tuple[int, int]):
    """Resample an RGBA template onto a canvas of ``canvas_shape = (H, W)``.

    The transformed template rectangle is positioned so its hull's top-left
    corner sits at ``(placement.x, placement.y)``.  Returns premultiplied
    ``rgb`` and ``alpha`` float arrays covering the whole canvas.
    """
    th, tw = template.shape[:2]
    m = _affine(placement.scale, placement.rotation, placement.shear)
    lo, _ = footprint_hull((th, tw), placement.scale, placement.rotation, placement.shear)
    centre = np.array([placement.x, placement.y], dtype=np.float64) - lo
    inv = np.linalg.inv(m)
    H, W = canvas_shape
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    dx = xs + 0.5 - centre[0]
    dy = ys + 0.5 - centre[1]
    u = inv[0, 0] * dx + inv[0, 1] * dy + tw / 2
    v = inv[1, 0] * dx + inv[1, 1] * dy + th / 2
    # pixel i of the template has its centre at i + 0.5
    coords = np.stack([v - 0.5, u - 0.5])
    tmpl = _premultiply(template)
    out = np.stack(
        [ndimage.map_coordinates(tmpl[..., ch], coords, order=1, mode="constant", cval=0.0)
         for ch in range(4)],
        axis=-1,
    )
    alpha = out[..., 3] / 255.0
    return out[..., :3], np.clip(alpha, 0.0, 1.0)


def mask_box(mask: np.ndarray) -> BoundingBox | None:
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return None
    return BoundingBox(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def paste_logo(canvas: np.ndarray, template: np.ndarray, placement: Placement,
               brightness: float = 1.0, jitter=(1.0, 1.0, 1.0)) -> BoundingBox | None:
    """Alpha-composite a transformed logo into ``canvas`` (float RGB, modified in place).

    Returns the tight box of the rendered footprint (alpha >= 0.5).
    """
    H, W = canvas.shape[:2]
    rgb, alpha = render_logo(template, placement, (H, W))
    with np.errstate(invalid="ignore", divide="ignore"):
        colour = np.where(alpha[..., None] > 1e-6, rgb / np.maximum(alpha[..., None], 1e-6), 0.0)
    colour = np.clip(colour * brightness * np.asarray(jitter)[None, None, :], 0, 255)
    canvas[:] = alpha[..., None] * colour + (1 - alpha[..., None]) * canvas
    return mask_box(alpha >= 0.5)


def _premultiply(template: np.ndarray) -> np.ndarray:
    t = template.astype(np.float64)
    t[..., :3] *= t[..., 3:4] / 255.0
    return t


# ---------------------------------------------------------------- templates

_SHAPES = ("circle", "triangle", "square_hole", "star", "cross", "diamond", "ring",
           "hexagon", "bars", "chevron", "half_moon", "arrow")

_PALETTE = [
    (220, 30, 40), (30, 90, 220), (250, 200, 20), (30, 170, 70), (150, 40, 190),
    (240, 120, 20), (20, 190, 200), (230, 60, 160), (90, 60, 30), (20, 20, 20),
]


def _polygon(n: int, r: float, c: float, phase: float = 0.0):
    return [(c + r * math.cos(phase + 2 * math.pi * i / n), c + r * math.sin(phase + 2 * math.pi * i / n))
            for i in range(n)]


def draw_template(shape: str, colour, accent, size: int = 96) -> np.ndarray:
    """Draw one RGBA logo template (straight alpha, uint8)."""
    im = Image.new("RGBA", (size, size), (0, 0, 0, 0))
    d = ImageDraw.Draw(im)
    s = size
    c = s / 2
    fill = tuple(colour) + (255,)
    acc = tuple(accent) + (255,)
    if shape == "circle":
        d.ellipse([0, 0, s - 1, s - 1], fill=fill)
        d.ellipse([s * 0.3, s * 0.3, s * 0.7, s * 0.7], fill=acc)
    elif shape == "triangle":
        d.polygon([(c, 0), (s - 1, s - 1), (0, s - 1)], fill=fill)
        d.polygon([(c, s * 0.45), (s * 0.7, s * 0.85), (s * 0.3, s * 0.85)], fill=acc)
    elif shape == "square_hole":
        d.rectangle([0, 0, s - 1, s - 1], fill=fill)
        d.rectangle([s * 0.3, s * 0.3, s * 0.7, s * 0.7], fill=acc)
    elif shape == "star":
        pts = []
        for i in range(10):
            r = c if i % 2 == 0 else c * 0.45
            a = -math.pi / 2 + i * math.pi / 5
            pts.append((c + r * math.cos(a), c + r * math.sin(a)))
        d.polygon(pts, fill=fill)
        d.ellipse([c - s * 0.12, c - s * 0.12, c + s * 0.12, c + s * 0.12], fill=acc)
    elif shape == "cross":
        d.rectangle([s * 0.33, 0, s * 0.67, s - 1], fill=fill)
        d.rectangle([0, s * 0.33, s - 1, s * 0.67], fill=fill)
        d.rectangle([s * 0.4, s * 0.4, s * 0.6, s * 0.6], fill=acc)
    elif shape == "diamond":
        d.polygon([(c, 0), (s - 1, c), (c, s - 1), (0, c)], fill=fill)
        d.polygon([(c, s * 0.3), (s * 0.7, c), (c, s * 0.7), (s * 0.3, c)], fill=acc)
    elif shape == "ring":
        d.ellipse([0, 0, s - 1, s - 1], fill=acc)
        d.ellipse([s * 0.12, s * 0.12, s * 0.88, s * 0.88], fill=fill)
        d.ellipse([s * 0.35, s * 0.35, s * 0.65, s * 0.65], fill=acc)
    elif shape == "hexagon":
        d.polygon(_polygon(6, c - 0.5, c), fill=fill)
        d.rectangle([s * 0.25, s * 0.44, s * 0.75, s * 0.56], fill=acc)
    elif shape == "bars":
        d.rectangle([0, 0, s - 1, s - 1], fill=acc)
        for i in range(3):
            d.rectangle([s * (0.08 + 0.32 * i), s * 0.08, s * (0.28 + 0.32 * i), s * 0.92], fill=fill)
    elif shape == "chevron":
        d.rectangle([0, 0, s - 1, s - 1], fill=fill)
        d.polygon([(s * 0.15, s * 0.3), (c, s * 0.7), (s * 0.85, s * 0.3), (s * 0.85, s * 0.5),
                   (c, s * 0.9), (s * 0.15, s * 0.5)], fill=acc)
    elif shape == "half_moon":
        d.pieslice([0, 0, s - 1, s - 1], 180, 360, fill=fill)
        d.rectangle([0, c, s - 1, s - 1], fill=acc)
    elif shape == "arrow":
        d.polygon([(0, s * 0.3), (s * 0.55, s * 0.3), (s * 0.55, 0), (s - 1, c), (s * 0.55, s - 1),
                   (s * 0.55, s * 0.7), (0, s * 0.7)], fill=fill)
        d.rectangle([s * 0.1, s * 0.45, s * 0.45, s * 0.55], fill=acc)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return np.asarray(im, dtype=np.uint8).copy()


def make_logo_set(n_classes: int = 10, n_brands: int = 5, size: int = 96, seed: int = 0):
    """Procedural logo templates and the class->brand map.

    Classes are split round-robin over brands; logos of the same brand share a
    main colour but never a shape, mimicking a brand owning several designs.
    Returns ``(templates, brand_map)`` where ``templates[c - 1]`` lists the
    templates of logo class ``c``.
    """
    if n_classes > len(_SHAPES):
        raise ValueError(f"at most {len(_SHAPES)} procedural logo classes")
    if not 1 <= n_brands <= n_classes:
        raise ValueError("need 1 <= n_brands <= n_classes")
    shapes = [str(s) for s in np.random.default_rng(seed).permutation(_SHAPES[:n_classes])]
    pairs = []
    templates = []
    per_brand: dict[int, int] = {}
    for ci in range(n_classes):
        b = ci % n_brands
        per_brand[b] = per_brand.get(b, 0) + 1
        colour = _PALETTE[b % len(_PALETTE)]
        accent = (255, 255, 255) if per_brand[b] == 1 else _PALETTE[(b + 5) % len(_PALETTE)]
        pairs.append((f"brand{b + 1}-{per_brand[b]}", f"brand{b + 1}"))
        templates.append([draw_template(shapes[ci], colour, accent, size)])
    return templates, BrandMap.from_pairs(pairs)


def make_backgrounds(n: int, size=(256, 256), seed: int = 0) -> list[np.ndarray]:
    """Textured product-photo-like backgrounds: gradient, smooth noise, muted clutter."""
    out = []
    H, W = size[1], size[0]
    for i in range(n):
        rng = np.random.default_rng([seed, i, 7])
        base = rng.uniform(90, 230, size=3)
        tilt = rng.uniform(-40, 40, size=(2, 3))
        yy, xx = np.mgrid[0:H, 0:W] / max(H, W)
        img = base[None, None, :] + xx[..., None] * tilt[0] + yy[..., None] * tilt[1]
        noise = ndimage.gaussian_filter(rng.normal(0, 1, size=(H, W, 3)), sigma=(12, 12, 0))
        img += noise / (noise.std() + 1e-9) * 8
        canvas = Image.fromarray(np.clip(img, 0, 255).astype(np.uint8))
        d = ImageDraw.Draw(canvas)
        for _ in range(int(rng.integers(1, 4))):
            grey = rng.uniform(60, 200)
            col = tuple(int(np.clip(grey + rng.uniform(-15, 15), 0, 255)) for _ in range(3))
            x0, y0 = rng.uniform(0, W), rng.uniform(0, H)
            x1, y1 = x0 + rng.uniform(20, W / 2), y0 + rng.uniform(20, H / 2)
            if rng.random() < 0.5:
                d.rectangle([x0, y0, x1, y1], fill=col)
            else:
                d.ellipse([x0, y0, x1, y1], fill=col)
        arr = np.asarray(canvas, dtype=np.float64)
        arr += rng.normal(0, 3, size=arr.shape)
        out.append(np.clip(arr, 0, 255).astype(np.uint8))
    return out


# ---------------------------------------------------------------- synthesis

def _occlude(canvas: np.ndarray, background: np.ndarray, box: BoundingBox, fraction: float,
             rng: np.random.Generator) -> None:
    if fraction <= 0:
        return
    x0, y0, x1, y1 = (int(v) for v in box.as_tuple())
    w, h = x1 - x0, y1 - y0
    side = int(rng.integers(0, 4))
    if side in (0, 1):
        cut = max(1, int(round(w * fraction)))
        ox0 = x0 if side == 0 else x1 - cut
        region = (ox0, y0, ox0 + cut, y1)
    else:
        cut = max(1, int(round(h * fraction)))
        oy0 = y0 if side == 2 else y1 - cut
        region = (x0, oy0, x1, oy0 + cut)
    rx0, ry0, rx1, ry1 = region
    pw, ph = rx1 - rx0, ry1 - ry0
    H, W = background.shape[:2]
    sx = int(rng.integers(0, W - pw + 1))
    sy = int(rng.integers(0, H - ph + 1))
    canvas[ry0:ry1, rx0:rx1] = background[sy:sy + ph, sx:sx + pw]


def synthesize_image(templates: Sequence[Sequence[np.ndarray]], background: np.ndarray,
                     brand_map: BrandMap, params: SynthesisParams, index: int):
    """Generate image ``index``; its RNG stream depends only on ``(seed, index)``."""
    rng = np.random.default_rng([params.seed, index])
    H, W = background.shape[:2]
    canvas = background.astype(np.float64).copy()
    if params.single_brand:
        brand = int(rng.integers(0, brand_map.n_brands))
        pool = [c for c in range(1, brand_map.n_classes + 1) if brand_map.brand_of(c) == brand]
    else:
        pool = list(range(1, brand_map.n_classes + 1))
    k = int(rng.integers(params.objects_per_image[0], params.objects_per_image[1] + 1))
    objects: list[tuple[BoundingBox, int]] = []
    for _ in range(k):
        cls = pool[int(rng.integers(0, len(pool)))]
        cands = templates[cls - 1]
        tmpl = cands[int(rng.integers(0, len(cands)))]
        for _attempt in range(25):
            scale = rng.uniform(*params.scale_range)
            rot = rng.uniform(*params.rotation_range)
            shear = rng.uniform(*params.shear_range)
            lo, hi = footprint_hull(tmpl.shape[:2], scale, rot, shear)
            fw, fh = hi - lo
            if fw > W or fh > H:
                continue
            x = int(rng.integers(0, int(W - math.ceil(fw)) + 1))
            y = int(rng.integers(0, int(H - math.ceil(fh)) + 1))
            cand = BoundingBox(x, y, x + fw, y + fh)
            if all(_disjoint(cand, b) for b, _ in objects):
                break
        else:
            continue
        bright = rng.uniform(*params.brightness_range)
        jitter = rng.uniform(*params.color_jitter_range, size=3)
        box = paste_logo(canvas, tmpl, Placement(x, y, scale, rot, shear), bright, jitter)
        if box is None:
            continue
        _occlude(canvas, background, box, rng.uniform(*params.occlusion_range), rng)
        objects.append((box, cls))
    if not objects:
        raise TemplateTooLarge(f"image {index}: no logo fits a {W}x{H} background")
    pixels = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
    return pixels, tuple(objects)


def _disjoint(a: BoundingBox, b: BoundingBox, margin: float = 4.0) -> bool:
    return (a.x_max + margin <= b.x_min or b.x_max + margin <= a.x_min
            or a.y_max + margin <= b.y_min or b.y_max + margin <= a.y_min)


def synthesize_dataset(templates: Sequence[Sequence[np.ndarray]], backgrounds: Sequence[np.ndarray],
                       params: SynthesisParams, n_images: int, brand_map: BrandMap,
                       start_index: int = 0) -> Dataset:
    """Build an in-memory dataset of ``n_images`` synthetic scenes.

    Background ``i`` is reused cyclically for image ``i``.
    """
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    if len(templates) != brand_map.n_classes or any(len(t) == 0 for t in templates):
        raise ValueError("need at least one template per logo class")
    min_scale = params.scale_range[0]
    bh, bw = min(b.shape[0] for b in backgrounds), min(b.shape[1] for b in backgrounds)
    for cls_templates in templates:
        for t in cls_templates:
            lo, hi = footprint_hull(t.shape[:2], min_scale, 0.0, 0.0)
            if (hi - lo)[0] > bw or (hi - lo)[1] > bh:
                raise TemplateTooLarge(f"template {t.shape[1]}x{t.shape[0]} exceeds background {bw}x{bh}")
    anns = []
    images = {}
    for i in range(start_index, start_index + n_images):
        bg = backgrounds[i % len(backgrounds)]
        pixels, objects = synthesize_image(templates, bg, brand_map, params, i)
        rel = relpath_for(i)
        anns.append(Annotation(rel, bg.shape[1], bg.shape[0], objects))
        images[rel] = pixels
    return Dataset(anns, brand_map, images=images)
