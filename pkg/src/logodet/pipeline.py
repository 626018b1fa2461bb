"""End-to-end runs built from the component modules: dataset synthesis,
proposals, training, detection, evaluation, parameter sweeps and timing.

Everything here is deterministic given the config; ``threads`` only changes
how per-image work is spread over worker processes, never the results.
"""
from __future__ import annotations

import csv
import logging
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from .boxes import Detection
from .brand import BrandPrediction, image_brand, recognise
from .config import Config
from .dataset import Dataset, split_dataset
from .metrics import AccuracyReport, DetectionEval, brand_accuracy, brand_auc, evaluate_dataset
from .network import NetworkParams, detect_image
from .postprocess import postprocess
from .proposals import ProposalParams, proposal_recall, selective_search_boxes
from .synth import make_backgrounds, make_logo_set, synthesize_dataset
from .training import TrainResult, train

log = logging.getLogger(__name__)

SWEEP_AXES = ("roi_count", "train_iterations", "train_fraction", "eval_iou")


# ----------------------------------------------------------------- data

def build_dataset(cfg: Config) -> Dataset:
    d = cfg.data
    templates, brand_map = make_logo_set(d.n_classes, d.n_brands, d.template_size, seed=d.seed)
    backgrounds = make_backgrounds(d.n_images, size=d.image_size, seed=d.seed + 1)
    return synthesize_dataset(templates, backgrounds, cfg.synth, d.n_images, brand_map)


def build_splits(cfg: Config, ds: Dataset | None = None) -> dict[str, Dataset]:
    ds = build_dataset(cfg) if ds is None else ds
    train_ds, val_ds, test_ds = split_dataset(ds, cfg.data.split, seed=cfg.data.seed)
    return {"train": train_ds, "val": val_ds, "test": test_ds}


# ----------------------------------------------------------------- parallel map

def _pmap(fn, items: Sequence, threads: int) -> list:
    """Order-preserving map; processes only when ``threads > 1``."""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * threads))))


class _ProposalJob:
    def __init__(self, params: ProposalParams):
        self.params = params

    def __call__(self, image):
        return selective_search_boxes(image, self.params)


def compute_proposals(ds: Dataset, params: ProposalParams, threads: int = 1) -> list[np.ndarray]:
    images = [ds.load_image(i) for i in range(len(ds))]
    return _pmap(_ProposalJob(params), images, threads)


# ----------------------------------------------------------------- detection

@dataclass
class DetectionRun:
    detections: list[list[Detection]]
    brands: list[BrandPrediction]
    times: dict[str, np.ndarray]  # per-image seconds for "network" and "post"


class _DetectJob:
    def __init__(self, params: NetworkParams, cfg: Config):
        self.params = params
        self.cfg = cfg

    def __call__(self, item):
        image, rois = item
        p = self.cfg.post
        t0 = time.perf_counter()
        probs, offsets = detect_image(self.params, image, rois)
        t1 = time.perf_counter()
        dets = postprocess(rois, probs, offsets, (image.shape[1], image.shape[0]),
                           p.score_threshold, p.nms_iou, p.max_per_image)
        t2 = time.perf_counter()
        return dets, t1 - t0, t2 - t1


def run_detection(params: NetworkParams, ds: Dataset, proposals: Sequence[np.ndarray], cfg: Config,
                  threads: int | None = None) -> DetectionRun:
    if len(proposals) != len(ds):
        raise ValueError("need one proposal array per image")
    items = [(ds.load_image(i), np.asarray(proposals[i])) for i in range(len(ds))]
    out = _pmap(_DetectJob(params, cfg), items, cfg.threads if threads is None else threads)
    dets = [o[0] for o in out]
    e = cfg.eval
    brands = [recognise(d, ds.brand_map, e.brand_min_score, e.brand_aggregate) for d in dets]
    times = {"network": np.array([o[1] for o in out]), "post": np.array([o[2] for o in out])}
    return DetectionRun(dets, brands, times)


# ----------------------------------------------------------------- evaluation

@dataclass
class EvalSummary:
    detection: DetectionEval
    accuracy: AccuracyReport
    auc: float
    auc_per_brand: dict[int, float]

    @property
    def map(self) -> float:
        return self.detection.map


def evaluate_run(ds: Dataset, detections: Sequence[Sequence[Detection]], brands: Sequence[BrandPrediction],
                 iou: float = 0.5, interpolation: str = "all") -> EvalSummary:
    det = evaluate_dataset(ds, detections, iou, interpolation)
    labels = {a.image_path: image_brand(a, ds.brand_map) for a in ds.annotations}
    preds = {a.image_path: b.decision for a, b in zip(ds.annotations, brands)}
    acc = brand_accuracy(preds, labels)
    scores = np.array([b.scores for b in brands])
    y = np.array([labels[a.image_path] for a in ds.annotations])
    auc, per = brand_auc(scores, y)
    return EvalSummary(det, acc, auc, per)


def train_model(ds: Dataset, proposals: Sequence[np.ndarray], cfg: Config, iterations: int | None = None,
                snapshots: Sequence[int] = ()) -> TrainResult:
    tcfg = cfg.train if iterations is None else replace(cfg.train, iterations=iterations)
    return train(ds, proposals, tcfg, cfg.arch, snapshots=snapshots)


# ----------------------------------------------------------------- sweeps

SWEEP_COLUMNS = ["axis", "value", "mAP", "accuracy_micro", "accuracy_macro", "auc", "recall"]


def _row(axis, value, s: EvalSummary, recall) -> list:
    return [axis, value, f"{100 * s.map:.2f}", f"{100 * s.accuracy.micro:.2f}",
            f"{100 * s.accuracy.macro:.2f}", f"{100 * s.auc:.2f}",
            "" if recall is None else f"{100 * recall:.2f}"]


def run_sweep(axis: str, values: Sequence, cfg: Config, splits: dict[str, Dataset],
              proposals: dict[str, list[np.ndarray]], params: NetworkParams | None = None) -> list[list]:
    """One row per axis value: ``[axis, value, mAP, acc_micro, acc_macro, auc, recall]`` (percent).

    ``roi_count`` and ``eval_iou`` reuse one trained model (``params`` or a
    fresh training run); ``eval_iou`` also reuses a single detection pass.
    ``train_iterations`` keeps snapshots of one run of ``max(values)``
    iterations.  ``train_fraction`` trains on the leading fraction of the
    (already shuffled) training split.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    if values != sorted(values):
        raise ValueError("sweep values must be sorted")
    test = splits["test"]
    test_props = proposals["test"]
    gts = [a.boxes for a in test.annotations]
    e = cfg.eval

    def model():
        if params is not None:
            return params
        return train_model(splits["train"], proposals["train"], cfg).params

    def evaluate(p, props, iou=e.iou):
        run = run_detection(p, test, props, cfg)
        return run, evaluate_run(test, run.detections, run.brands, iou, e.interpolation)

    rows = []
    if axis == "eval_iou":
        run, _ = evaluate(model(), test_props)
        recall = proposal_recall(test_props, gts, e.iou)
        for v in values:
            s = evaluate_run(test, run.detections, run.brands, float(v), e.interpolation)
            rows.append(_row(axis, v, s, recall))
    elif axis == "roi_count":
        p = model()
        for v in values:
            props = [np.asarray(x)[: int(v)] for x in test_props]
            _, s = evaluate(p, props)
            rows.append(_row(axis, v, s, proposal_recall(props, gts, e.iou)))
    elif axis == "train_iterations":
        res = train_model(splits["train"], proposals["train"], cfg, iterations=int(max(values)),
                          snapshots=[int(v) for v in values])
        recall = proposal_recall(test_props, gts, e.iou)
        for v in values:
            _, s = evaluate(res.snapshots[int(v)], test_props)
            rows.append(_row(axis, v, s, recall))
    else:
        tr = splits["train"]
        recall = proposal_recall(test_props, gts, e.iou)
        for v in values:
            if not 0 < float(v) <= 1:
                raise ValueError("train fractions must be in (0, 1]")
            n = max(1, int(round(float(v) * len(tr))))
            p = train_model(tr.subset(range(n)), proposals["train"][:n], cfg).params
            _, s = evaluate(p, test_props)
            rows.append(_row(axis, v, s, recall))
    return rows


def write_sweep_csv(path, rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        w.writerows(rows)


# ----------------------------------------------------------------- benchmark

def machine_info() -> dict:
    return {
        "platform": platform.platform(),
        "processor": platform.processor() or platform.machine(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cpus": os.cpu_count(),
    }


def pad_rois(rois: np.ndarray, n: int, image_size: tuple[int, int], seed: int = 0) -> np.ndarray:
    """Top up a proposal list to exactly ``n`` boxes with seeded random boxes inside the image."""
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)[:n]
    if len(rois) >= n:
        return rois
    w, h = image_size
    rng = np.random.default_rng(seed)
    k = n - len(rois)
    x0 = rng.uniform(0, w - 8, k)
    y0 = rng.uniform(0, h - 8, k)
    x1 = np.minimum(w, x0 + rng.uniform(8, w, k))
    y1 = np.minimum(h, y0 + rng.uniform(8, h, k))
    extra = np.floor(np.stack([x0, y0, np.maximum(x1, x0 + 8), np.maximum(y1, y0 + 8)], axis=1))
    return np.concatenate([rois, extra])


def _stats(seconds) -> dict:
    ms = 1000 * np.asarray(seconds, dtype=np.float64)
    if len(ms) == 0:
        return {"mean_ms": 0.0, "std_ms": 0.0, "median_ms": 0.0, "n": 0}
    return {"mean_ms": float(ms.mean()), "std_ms": float(ms.std()), "median_ms": float(np.median(ms)),
            "n": int(len(ms))}


@dataclass
class BenchmarkReport:
    stages: dict[str, dict]      # proposal / network / post -> timing stats
    modes: dict[str, dict]       # shared / per_region at a fixed RoI count
    mode_ratio: float
    rois: int
    machine: dict
    train_seconds: float | None = None


def _time_image(params, image, rois, cfg: Config):
    t0 = time.perf_counter()
    probs, offsets = detect_image(params, image, rois)
    t1 = time.perf_counter()
    p = cfg.post
    postprocess(rois, probs, offsets, (image.shape[1], image.shape[0]),
                p.score_threshold, p.nms_iou, p.max_per_image)
    return t1 - t0, time.perf_counter() - t1


def benchmark(params: NetworkParams, ds: Dataset, cfg: Config, train_seconds: float | None = None) -> BenchmarkReport:
    """Per-image wall time of each test-time stage, plus the mode comparison.

    The first ``cfg.benchmark.warmup`` images are run but not recorded.
    """
    b = cfg.benchmark
    n = min(len(ds), b.n_images + b.warmup)
    if n - b.warmup < 1:
        raise ValueError("benchmark needs more images than warm-up passes")
    prop_t, net_t, post_t = [], [], []
    for i in range(n):
        image = ds.load_image(i)
        t0 = time.perf_counter()
        rois = selective_search_boxes(image, cfg.proposals)
        tp = time.perf_counter() - t0
        tn, tq = _time_image(params, image, rois, cfg)
        if i >= b.warmup:
            prop_t.append(tp)
            net_t.append(tn)
            post_t.append(tq)
    stages = {"proposal": _stats(prop_t), "network": _stats(net_t), "post": _stats(post_t)}
    modes = {}
    m = min(len(ds), b.mode_images)
    for mode in ("shared", "per_region"):
        p = params.with_mode(mode)
        times = []
        for i in range(-1 if b.warmup else 0, m):
            image = ds.load_image(max(i, 0))
            rois = pad_rois(np.zeros((0, 4)), b.rois, (image.shape[1], image.shape[0]), seed=max(i, 0))
            t = sum(_time_image(p, image, rois, cfg))
            if i >= 0:
                times.append(t)
        modes[mode] = _stats(times)
    ratio = modes["per_region"]["mean_ms"] / max(modes["shared"]["mean_ms"], 1e-9)
    return BenchmarkReport(stages, modes, ratio, b.rois, machine_info(), train_seconds)


def write_benchmark_csv(path, rep: BenchmarkReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "name", "mean_ms", "std_ms", "median_ms", "n"])
        for kind, table in (("stage", rep.stages), (f"mode@{rep.rois}rois", rep.modes)):
            for name, s in table.items():
                w.writerow([kind, name, f"{s['mean_ms']:.3f}", f"{s['std_ms']:.3f}", f"{s['median_ms']:.3f}", s["n"]])
        w.writerow(["ratio", "per_region/shared", f"{rep.mode_ratio:.3f}", "", "", ""])
        if rep.train_seconds is not None:
            w.writerow(["train", "total", f"{1000 * rep.train_seconds:.3f}", "", "", 1])


# ----------------------------------------------------------------- overlays

def draw_overlay(image: np.ndarray, gt_boxes, detections: Sequence[Detection], class_names=None) -> Image.Image:
    """Ground truth in green, detections in red with class and score."""
    im = Image.fromarray(np.asarray(image, dtype=np.uint8)).convert("RGB")
    draw = ImageDraw.Draw(im)
    for b in np.asarray(gt_boxes).reshape(-1, 4):
        draw.rectangle([b[0], b[1], max(b[0], b[2] - 1), max(b[1], b[3] - 1)], outline=(0, 200, 0), width=2)
    for d in detections:
        x0, y0, x1, y1 = d.box.as_tuple()
        draw.rectangle([x0, y0, max(x0, x1 - 1), max(y0, y1 - 1)], outline=(230, 20, 20), width=1)
        name = class_names[d.cls - 1] if class_names else str(d.cls)
        draw.text((x0 + 2, y0 + 1), f"{name} {d.score:.2f}", fill=(230, 20, 20))
    return im
