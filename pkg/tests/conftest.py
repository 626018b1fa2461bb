import json

import pytest

from logodet.cli import main

TINY_CONFIG = {
    "seed": 0,
    "data": {"n_classes": 4, "n_brands": 2, "n_images": 16, "split": [0.5, 0.25, 0.25],
             "image_size": [64, 64], "template_size": 24},
    "synth": {"scale_range": [0.8, 1.2]},
    "proposals": {"k": 50.0, "min_size": 10, "top_k": 200},
    "network": {"conv_channels": [8, 16], "fc_dims": [32, 32], "levels": [[2, 2]], "warp_size": 16},
    "train": {"iterations": 30, "rois_per_image": 16},
    "eval": {"overlays": 2},
    "benchmark": {"n_images": 2, "rois": 100, "mode_images": 1, "warmup": 0},
}

TINY_CHAIN = [
    ["synth"], ["split"], ["stats"], ["stats", "--split", "test"], ["propose"], ["train"], ["detect"],
    ["evaluate"], ["compress", "--evaluate"], ["detect", "--model", "{out}/model.svd.ckpt", "--tag", "svd"],
    ["evaluate", "--tag", "svd"],
    ["sweep", "--axis", "eval_iou", "--values", "0.5,0.7,0.9"],
    ["sweep", "--axis", "roi_count", "--values", "50,200"],
    ["sweep", "--axis", "train_iterations", "--values", "10,30"],
    ["sweep", "--axis", "train_fraction", "--values", "0.5,1"],
    ["benchmark"],
]


def run_tiny_chain(root, threads):
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY_CONFIG))
    out = root / f"threads{threads}"
    codes = []
    for step in TINY_CHAIN:
        args = [a.format(out=out) for a in step]
        codes.append(main([*args, "--config", str(cfg), "--out", str(out), "--threads", str(threads)]))
    return out, codes


@pytest.fixture(scope="session")
def tiny_runs(tmp_path_factory):
    """The full command chain on a tiny config, once single-process and once with two workers."""
    root = tmp_path_factory.mktemp("cli")
    return {t: run_tiny_chain(root, t) for t in (1, 2)}


# ----------------------------------------------------------------- acceptance report

_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
