import numpy as np
import pytest

from conftest import TINY_CONFIG
from logodet import pipeline
from logodet.boxes import BoundingBox, Detection
from logodet.config import build_config
from logodet.network import init_params


@pytest.fixture(scope="module")
def tiny():
    cfg = build_config(TINY_CONFIG)
    splits = pipeline.build_splits(cfg)
    props = {s: pipeline.compute_proposals(ds, cfg.proposals) for s, ds in splits.items()}
    params = pipeline.train_model(splits["train"], props["train"], cfg, iterations=10).params
    return cfg, splits, props, params


def test_splits_follow_config(tiny):
    cfg, splits, _, _ = tiny
    assert [len(splits[s]) for s in ("train", "val", "test")] == [8, 4, 4]


def test_eval_iou_sweep_uses_one_detection_pass(tiny, monkeypatch):
    cfg, splits, props, params = tiny
    calls = []
    real = pipeline.run_detection

    def counting(*a, **kw):
        calls.append(1)
        return real(*a, **kw)

    monkeypatch.setattr(pipeline, "run_detection", counting)
    rows = pipeline.run_sweep("eval_iou", [0.5, 0.7, 0.9], cfg, splits, props, params)
    assert len(rows) == 3 and len(calls) == 1
    maps = [float(r[2]) for r in rows]
    assert maps == sorted(maps, reverse=True)


def test_roi_count_sweep_recall_monotone(tiny):
    cfg, splits, props, params = tiny
    rows = pipeline.run_sweep("roi_count", [10, 50, 200], cfg, splits, props, params)
    recall = [float(r[6]) for r in rows]
    assert recall == sorted(recall)


def test_sweep_rejects_bad_values(tiny):
    cfg, splits, props, params = tiny
    with pytest.raises(ValueError):
        pipeline.run_sweep("eval_iou", [0.9, 0.5], cfg, splits, props, params)
    with pytest.raises(ValueError):
        pipeline.run_sweep("depth", [1], cfg, splits, props, params)
    with pytest.raises(ValueError):
        pipeline.run_sweep("eval_iou", [], cfg, splits, props, params)


def test_iteration_snapshots_match_separate_runs(tiny):
    cfg, splits, props, _ = tiny
    res = pipeline.train_model(splits["train"], props["train"], cfg, iterations=6, snapshots=[6])
    alone = pipeline.train_model(splits["train"], props["train"], cfg, iterations=6)
    for k, v in alone.params.tensors.items():
        assert np.array_equal(res.snapshots[6].tensors[k], v)


def test_detection_independent_of_workers(tiny):
    cfg, splits, props, params = tiny
    a = pipeline.run_detection(params, splits["test"], props["test"], cfg, threads=1)
    b = pipeline.run_detection(params, splits["test"], props["test"], cfg, threads=2)
    assert a.detections == b.detections
    assert all(np.array_equal(x.scores, y.scores) for x, y in zip(a.brands, b.brands))


def test_pmap_preserves_order():
    assert pipeline._pmap(abs, list(range(-20, 0)), 3) == list(range(20, 0, -1))


def test_pad_rois():
    base = np.array([[0, 0, 10, 10]], float)
    out = pipeline.pad_rois(base, 50, (64, 48), seed=1)
    assert out.shape == (50, 4) and np.array_equal(out[0], base[0])
    assert np.all(out[:, 2] > out[:, 0]) and np.all(out[:, 3] > out[:, 1])
    assert np.all(out[:, :2] >= 0) and np.all(out[:, 2] <= 64) and np.all(out[:, 3] <= 48)
    assert np.array_equal(out, pipeline.pad_rois(base, 50, (64, 48), seed=1))
    assert len(pipeline.pad_rois(np.zeros((80, 4)), 50, (64, 48))) == 50


def test_zero_roi_image_timing(tiny):
    cfg, splits, _, params = tiny
    image = splits["test"].load_image(0)
    t_net, t_post = pipeline._time_image(params, image, np.zeros((0, 4)), cfg)
    assert t_net >= 0 and t_post >= 0


def test_overlay_draws_boxes():
    img = np.zeros((20, 20, 3), np.uint8)
    im = pipeline.draw_overlay(img, np.array([[2, 2, 10, 10]]), [Detection(BoundingBox(5, 5, 6, 6), 1, 0.5)], ["x"])
    arr = np.asarray(im)
    assert arr[2, 2, 1] == 200 and arr[5, 5, 0] == 230


def test_untrained_model_runs_end_to_end(tiny):
    cfg, splits, props, _ = tiny
    p = init_params(cfg.arch)
    run = pipeline.run_detection(p, splits["test"], props["test"], cfg)
    s = pipeline.evaluate_run(splits["test"], run.detections, run.brands)
    assert 0 <= s.map <= 1 and 0 <= s.auc <= 1
