"""Command-line entry point.

All commands work inside one run directory (``--out``, else ``$LOGODET_OUT``,
else ``./runs``).  ``synth`` stores the resolved configuration there as
``config.json``; later commands pick it up unless ``--config`` is given.
Every command writes ``manifests/<command>.json``.

Exit codes: 0 success, 1 invalid configuration or input data, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__, kernels
from .brand import recognise, write_brand_csv
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint, write_loss_trace
from .config import Config, ConfigError, load_config, shipped_config
from .dataset import (InvalidFractions, ParseError, ValidationError, dataset_stats, load_dataset,
                      save_dataset, save_split, write_stats_csv)
from .metrics import write_accuracy_csv, write_ap_csv
from .pipeline import (BenchmarkReport, benchmark, build_dataset, compute_proposals, draw_overlay,
                       evaluate_run, run_sweep, SWEEP_AXES, train_model, write_benchmark_csv,
                       write_sweep_csv, run_detection)
from .postprocess import read_detections, write_detections
from .proposals import proposal_recall, read_proposals, write_proposals
from .svd import compare_compressed, compress_network, trunk_flops, write_compression_csv

log = logging.getLogger("logodet")

OUT_ENV = "LOGODET_OUT"
SPLITS = ("train", "val", "test")
RECALL_KS = (250, 500, 1000, 2000)


class InputError(ValueError):
    """Missing or inconsistent files in the run directory."""


# ----------------------------------------------------------------- helpers

class Run:
    def __init__(self, args):
        self.args = args
        self.out = Path(args.out or os.environ.get(OUT_ENV) or "runs")
        self.out.mkdir(parents=True, exist_ok=True)
        cfg_path = args.config
        if cfg_path is None:
            saved = self.out / "config.json"
            cfg_path = saved if saved.exists() else shipped_config()
        overrides = list(args.set or [])
        if args.threads is not None:
            overrides.append(f"threads={args.threads}")
        self.cfg: Config = load_config(cfg_path, overrides)
        self.config_path = str(cfg_path)
        self.timings: dict[str, float] = {}
        self.outputs: list[str] = []
        self.extra: dict = {}

    @property
    def data_root(self) -> Path:
        return self.out / "data"

    def path(self, name: str) -> Path:
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(name)
        return p

    def timed(self, key: str):
        run = self

        class _T:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                run.timings[key] = time.perf_counter() - self.t0

        return _T()

    def dataset(self, split: str | None):
        if not (self.data_root / "annotations.jsonl").exists():
            raise InputError(f"{self.data_root}: no dataset; run `logodet synth` first")
        if split is not None and not (self.data_root / f"annotations.{split}.jsonl").exists():
            raise InputError(f"{self.data_root}: no '{split}' split; run `logodet split` first")
        return load_dataset(self.data_root, split)

    def proposals(self, split: str, ds):
        path = self.out / f"proposals.{split}.jsonl"
        if not path.exists():
            raise InputError(f"{path}: missing; run `logodet propose --split {split}` first")
        table = read_proposals(path)
        try:
            return [table[a.image_path] for a in ds.annotations]
        except KeyError as e:
            raise InputError(f"{path}: no proposals for image {e}") from None

    def model(self, path=None):
        path = Path(path) if path else self.out / "model.ckpt"
        if not path.exists():
            raise InputError(f"{path}: missing; run `logodet train` first")
        return load_checkpoint(path)

    def manifest(self, command: str) -> None:
        m = {
            "command": command,
            "argv": sys.argv[1:],
            "config": self.config_path,
            "config_sha256": self.cfg.digest(),
            "seed": self.cfg.seed,
            "threads": self.cfg.threads,
            "versions": {"logodet": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                         "python": sys.version.split()[0], "kernels": kernels.BACKEND},
            "timings_s": {k: round(v, 4) for k, v in self.timings.items()},
            "outputs": sorted(set(self.outputs)),
            **self.extra,
        }
        p = self.out / "manifests" / f"{command}.json"
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(m, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


# ----------------------------------------------------------------- commands

def cmd_synth(run: Run) -> None:
    with run.timed("synth"):
        ds = build_dataset(run.cfg)
        save_dataset(ds, run.data_root)
    (run.out / "config.json").write_text(json.dumps(run.cfg.to_dict(), indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
    run.outputs += ["config.json", "data/annotations.jsonl", "data/classes.tsv"]
    print(f"synthesised {len(ds)} images into {run.data_root}")


def cmd_split(run: Run) -> None:
    from .dataset import split_dataset

    ds = run.dataset(None)
    parts = split_dataset(ds, run.cfg.data.split, seed=run.cfg.data.seed)
    for name, part in zip(SPLITS, parts):
        save_split(part, run.data_root, name)
        run.outputs.append(f"data/annotations.{name}.jsonl")
    with open(run.path("split.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("split,images\n")
        for name, part in zip(SPLITS, parts):
            fh.write(f"{name},{len(part)}\n")
    print(" ".join(f"{n}={len(p)}" for n, p in zip(SPLITS, parts)))


def cmd_stats(run: Run) -> None:
    split = run.args.split
    ds = run.dataset(split)
    st = dataset_stats(ds)
    write_stats_csv(st, run.path(f"stats{'.' + split if split else ''}.csv"))
    print(f"images {st.n_images}")
    print(f"objects {st.n_objects}")
    print(f"logo_classes {st.n_classes}")
    print(f"brands {st.n_brands}")
    print(f"mean_width {st.mean_width:.1f}")
    print(f"mean_height {st.mean_height:.1f}")


def cmd_propose(run: Run) -> None:
    splits = SPLITS if run.args.split == "all" else (run.args.split,)
    rows = []
    for split in splits:
        ds = run.dataset(split)
        with run.timed(f"propose.{split}"):
            props = compute_proposals(ds, run.cfg.proposals, run.cfg.threads)
        write_proposals(run.path(f"proposals.{split}.jsonl"), [a.image_path for a in ds.annotations], props)
        gts = [a.boxes for a in ds.annotations]
        for k in RECALL_KS:
            rows.append((split, k, proposal_recall(props, gts, run.cfg.eval.iou, top_k=k)))
        print(f"{split}: {len(ds)} images, mean {np.mean([len(p) for p in props]):.1f} proposals")
    with open(run.path("recall.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("split,top_k,recall\n")
        for split, k, r in rows:
            fh.write(f"{split},{k},{100 * r:.2f}\n")


def cmd_train(run: Run) -> None:
    ds = run.dataset("train")
    props = run.proposals("train", ds)
    with run.timed("train"):
        res = train_model(ds, props, run.cfg)
    save_checkpoint(run.path("model.ckpt"), res.params)
    write_loss_trace(run.path("loss.csv"), res.loss_trace, window=50)
    run.extra["skipped_iterations"] = res.skipped
    print(f"trained {len(res.loss_trace)} iterations in {run.timings['train']:.1f}s")


def cmd_detect(run: Run) -> None:
    split = run.args.split
    ds = run.dataset(split)
    props = run.proposals(split, ds)
    params = run.model(run.args.model)
    with run.timed("detect"):
        res = run_detection(params, ds, props, run.cfg)
    names = [a.image_path for a in ds.annotations]
    suffix = f".{run.args.tag}" if run.args.tag else ""
    write_detections(run.path(f"detections{suffix}.{split}.jsonl"), names, res.detections, ds.brand_map)
    write_brand_csv(run.path(f"brands{suffix}.{split}.csv"), names, res.brands, ds.brand_map)
    for i in range(min(run.cfg.eval.overlays, len(ds))):
        im = draw_overlay(ds.load_image(i), ds.annotations[i].boxes, res.detections[i], ds.brand_map.class_names)
        im.save(run.path(f"overlays{suffix}/{Path(names[i]).stem}.png"))
    print(f"{sum(len(d) for d in res.detections)} detections on {len(ds)} images")


def cmd_evaluate(run: Run) -> None:
    split = run.args.split
    ds = run.dataset(split)
    suffix = f".{run.args.tag}" if run.args.tag else ""
    det_path = Path(run.args.detections) if run.args.detections else run.out / f"detections{suffix}.{split}.jsonl"
    if not det_path.exists():
        raise InputError(f"{det_path}: missing; run `logodet detect` first")
    table = read_detections(det_path, ds.brand_map)
    missing = [a.image_path for a in ds.annotations if a.image_path not in table]
    if missing:
        raise InputError(f"{det_path}: no record for image {missing[0]!r}")
    dets = [table[a.image_path] for a in ds.annotations]
    e = run.cfg.eval
    brands = [recognise(d, ds.brand_map, e.brand_min_score, e.brand_aggregate) for d in dets]
    iou = run.args.iou if run.args.iou is not None else e.iou
    s = evaluate_run(ds, dets, brands, iou, e.interpolation)
    write_ap_csv(run.path(f"ap{suffix}.{split}.csv"), s.detection, ds.brand_map)
    write_accuracy_csv(run.path(f"accuracy{suffix}.{split}.csv"), s.accuracy, s.auc, ds.brand_map)
    print(f"mAP@{iou:.2f} {100 * s.map:.2f}")
    print(f"accuracy {100 * s.accuracy.micro:.2f} (macro {100 * s.accuracy.macro:.2f})")
    print(f"auc {100 * s.auc:.2f}")


def cmd_compress(run: Run) -> None:
    a = run.args
    sv = run.cfg.svd
    rank, frac, energy = a.rank, a.rank_fraction, a.energy
    if rank is None and frac is None and energy is None:
        rank, frac, energy = sv.rank, sv.rank_fraction, sv.energy
    params = run.model(a.model)
    with run.timed("compress"):
        comp = compress_network(params, rank=rank, rank_fraction=frac, energy=energy)
    save_checkpoint(run.path("model.svd.ckpt"), comp)
    run.extra["trunk_flops"] = [trunk_flops(params), trunk_flops(comp)]
    print(f"FC trunk multiply-adds {trunk_flops(params)} -> {trunk_flops(comp)}")
    if a.evaluate:
        ds = run.dataset(a.split)
        props = run.proposals(a.split, ds)
        with run.timed("compare"):
            rep = compare_compressed(params, comp, ds, props, run.cfg)
        write_compression_csv(run.path(f"svd.{a.split}.csv"), rep)
        run.timings["fc_base"] = rep.fc_seconds[0]
        run.timings["fc_compressed"] = rep.fc_seconds[1]
        d = rep.deltas
        print(f"mAP {d['mAP']:+.2f}  accuracy {d['accuracy']:+.2f}  auc {d['auc']:+.2f} (points)")
        print(f"argmax agreement {100 * rep.argmax_agreement:.2f}%  FC latency x{rep.fc_latency_ratio:.3f}")


def cmd_sweep(run: Run) -> None:
    axis = run.args.axis
    values = _floats(run.args.values)
    if axis in ("roi_count", "train_iterations"):
        values = [int(v) for v in values]
    splits = {s: run.dataset(s) for s in ("train", "test")}
    props = {s: run.proposals(s, ds) for s, ds in splits.items()}
    params = None
    if axis in ("eval_iou", "roi_count") and (run.out / "model.ckpt").exists() and not run.args.retrain:
        params = run.model()
    with run.timed("sweep"):
        rows = run_sweep(axis, values, run.cfg, splits, props, params)
    write_sweep_csv(run.path(f"sweep_{axis}.csv"), rows)
    for r in rows:
        print(" ".join(str(v) for v in r))


def cmd_benchmark(run: Run) -> None:
    ds = run.dataset(run.args.split)
    params = run.model(run.args.model)
    train_s = None
    m = run.out / "manifests" / "train.json"
    if m.exists():
        train_s = json.loads(m.read_text(encoding="utf-8")).get("timings_s", {}).get("train")
    with run.timed("benchmark"):
        rep: BenchmarkReport = benchmark(params, ds, run.cfg, train_s)
    write_benchmark_csv(run.path("benchmark.csv"), rep)
    run.extra["machine"] = rep.machine
    for stage, s in rep.stages.items():
        print(f"{stage:10s} {s['mean_ms']:9.1f} ms  (sd {s['std_ms']:.1f}, median {s['median_ms']:.1f})")
    print(f"per_region/shared at {rep.rois} RoIs: x{rep.mode_ratio:.1f}")


COMMANDS = {
    "synth": cmd_synth, "split": cmd_split, "stats": cmd_stats, "propose": cmd_propose,
    "train": cmd_train, "detect": cmd_detect, "compress": cmd_compress, "evaluate": cmd_evaluate,
    "sweep": cmd_sweep, "benchmark": cmd_benchmark,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config (default: run dir config.json, else the desk config)")
    common.add_argument("--out", help=f"run directory (default ${OUT_ENV} or ./runs)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. train.iterations=500")
    common.add_argument("--threads", type=int, help="worker processes for per-image stages")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="logodet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate the synthetic dataset")
    sub.add_parser("split", parents=[common], help="train/val/test split")
    s = sub.add_parser("stats", parents=[common], help="dataset statistics")
    s.add_argument("--split", choices=SPLITS)
    s = sub.add_parser("propose", parents=[common], help="selective-search proposals")
    s.add_argument("--split", choices=(*SPLITS, "all"), default="all")
    sub.add_parser("train", parents=[common], help="train the detector")
    for name, text in (("detect", "run the detector"), ("evaluate", "mAP, accuracy and AUC")):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--split", choices=SPLITS, default="test")
        s.add_argument("--tag", help="suffix distinguishing alternative runs, e.g. svd")
    sub.choices["detect"].add_argument("--model", help="checkpoint (default model.ckpt)")
    sub.choices["evaluate"].add_argument("--iou", type=float)
    sub.choices["evaluate"].add_argument("--detections", help="detections JSONL (default from the run dir)")
    s = sub.add_parser("compress", parents=[common], help="truncated-SVD compression of the FC trunk")
    s.add_argument("--model")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--rank", type=int)
    g.add_argument("--rank-fraction", type=float)
    g.add_argument("--energy", type=float, help="retained spectral energy fraction")
    s.add_argument("--evaluate", action="store_true", help="compare against the uncompressed model")
    s.add_argument("--split", choices=SPLITS, default="test")
    s = sub.add_parser("sweep", parents=[common], help="parameter sweep")
    s.add_argument("--axis", choices=SWEEP_AXES, required=True)
    s.add_argument("--values", required=True, help="comma-separated, ascending")
    s.add_argument("--retrain", action="store_true", help="ignore an existing model.ckpt")
    s = sub.add_parser("benchmark", parents=[common], help="stage timing and mode comparison")
    s.add_argument("--split", choices=SPLITS, default="test")
    s.add_argument("--model")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = Run(args)
        with run.timed("total"):
            COMMANDS[args.command](run)
        run.manifest(args.command)
    except (ConfigError, ValidationError, ParseError, InvalidFractions, InputError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - report, never traceback, at the CLI boundary
        log.debug("failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
