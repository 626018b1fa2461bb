import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from logodet.boxes import BoundingBox, BrandMap, Detection
from logodet.brand import (
    MultiBrandImage,
    UnknownClass,
    brand_scores,
    image_brand,
    predict_brand,
    recognise,
    write_brand_csv,
)
from logodet.dataset import Annotation

BM = BrandMap.from_pairs([("nike-1", "nike"), ("nike-2", "nike"), ("chanel-1", "chanel"), ("puma-1", "puma")])
BOX = BoundingBox(0, 0, 4, 4)


def dets(*pairs):
    return [Detection(BOX, BM.class_id(c), s) for c, s in pairs]


def test_max_rule_example():
    s = brand_scores(dets(("nike-1", 0.9), ("nike-2", 0.4), ("chanel-1", 0.3)), BM)
    assert s.tolist() == [0.9, 0.3, 0.0]
    assert brand_scores([], BM).tolist() == [0, 0, 0]


def test_sum_aggregate():
    s = brand_scores(dets(("nike-1", 0.5), ("nike-2", 0.25), ("nike-1", 0.5)), BM, "sum")
    assert s.tolist() == [1.0, 0, 0]


def test_unknown_class():
    with pytest.raises(UnknownClass):
        brand_scores([Detection(BOX, 9, 0.5)], BM)


def test_random_detections_match_grouping_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        ds = [Detection(BOX, int(rng.integers(1, 5)), float(rng.random())) for _ in range(20)]
        expect = [max([d.score for d in ds if BM.brand_names[BM.brand_of(d.cls)] == b], default=0.0)
                  for b in BM.brand_names]
        assert brand_scores(ds, BM).tolist() == expect


def test_predict_examples():
    assert predict_brand(np.array([0.9, 0.3, 0]), 0.1) == 0
    assert predict_brand(np.zeros(3), 0.1) is None
    assert predict_brand(np.array([0.2, 0.7, 0.7]), 0.1) == 1
    with pytest.raises(ValueError):
        predict_brand(np.zeros(3), 1.5)


def test_recognise_decision_score():
    p = recognise(dets(("chanel-1", 0.6)), BM)
    assert p.decision == 1 and p.decision_score == 0.6


detection_lists = st.lists(st.tuples(st.integers(1, 4), st.floats(0.0, 1.0)), max_size=15)


@settings(max_examples=100, deadline=None)
@given(detection_lists, st.floats(0.01, 1.0), st.randoms(use_true_random=False))
def test_brand_properties(pairs, factor, rnd):
    ds = [Detection(BOX, c, s) for c, s in pairs]
    base = brand_scores(ds, BM)
    shuffled = list(ds)
    rnd.shuffle(shuffled)
    assert np.array_equal(brand_scores(shuffled, BM), base)
    scaled = brand_scores([Detection(BOX, d.cls, d.score * factor) for d in ds], BM)
    if base.max() > 0 and np.sum(base == base.max()) == 1:
        assert predict_brand(scaled) == predict_brand(base)
    extra = Detection(BOX, 3, rnd.random())
    grown = brand_scores(ds + [extra], BM)
    assert np.all(grown >= base)


def test_image_brand():
    a = Annotation("x", 10, 10, ((BOX, 1), (BOX, 2)))
    assert image_brand(a, BM) == 0
    with pytest.raises(MultiBrandImage):
        image_brand(Annotation("y", 10, 10, ((BOX, 1), (BOX, 3))), BM)


def test_brand_csv(tmp_path):
    preds = [recognise(dets(("nike-2", 0.75)), BM), recognise([], BM, min_score=0.1)]
    write_brand_csv(tmp_path / "b.csv", ["a.png", "b.png"], preds, BM)
    rows = list(csv.reader(open(tmp_path / "b.csv")))
    assert rows[0] == ["image", "brand", "score", "nike", "chanel", "puma"]
    assert rows[1][:4] == ["a.png", "nike", "0.750000", "0.750000"]
    assert rows[2][1] == ""
