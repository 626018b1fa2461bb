import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from logodet.boxes import (
    BoundingBox,
    BrandMap,
    DegenerateBox,
    Detection,
    InvalidBox,
    bbox_decode,
    bbox_encode,
    decode_boxes,
    encode_boxes,
    iou,
    iou_matrix,
)


def B(*v):
    return BoundingBox(*v)


@st.composite
def boxes(draw, limit=200):
    x0 = draw(st.integers(0, limit - 2))
    y0 = draw(st.integers(0, limit - 2))
    x1 = draw(st.integers(x0 + 1, limit))
    y1 = draw(st.integers(y0 + 1, limit))
    return B(x0, y0, x1, y1)


def test_iou_examples():
    assert iou(B(0, 0, 10, 10), B(0, 0, 10, 10)) == 1.0
    assert iou(B(0, 0, 10, 10), B(20, 20, 30, 30)) == 0.0
    assert iou(B(0, 0, 10, 10), B(5, 0, 15, 10)) == pytest.approx(50 / 150)


def test_touching_boxes_do_not_overlap():
    # half-open: [0, 10) and [10, 20) share no pixel
    assert iou(B(0, 0, 10, 10), B(10, 0, 20, 10)) == 0.0


@given(boxes(), boxes())
def test_iou_symmetric_bounded(a, b):
    v = iou(a, b)
    assert v == pytest.approx(iou(b, a))
    assert 0.0 <= v <= 1.0
    assert (v == 1.0) == (a == b)


@given(boxes(), boxes())
def test_iou_matches_pixel_count(a, b):
    # oracle: rasterise both boxes on the integer grid
    grid_a = np.zeros((200, 200), bool)
    grid_b = np.zeros((200, 200), bool)
    grid_a[int(a.y_min):int(a.y_max), int(a.x_min):int(a.x_max)] = True
    grid_b[int(b.y_min):int(b.y_max), int(b.x_min):int(b.x_max)] = True
    expect = (grid_a & grid_b).sum() / (grid_a | grid_b).sum()
    assert iou(a, b) == pytest.approx(expect)


def test_iou_matrix_agrees_with_scalar():
    rng = np.random.default_rng(0)
    xs = rng.integers(0, 40, (6, 2))
    ws = rng.integers(1, 30, (6, 2))
    arr = np.concatenate([xs, xs + ws], axis=1).astype(float)
    m = iou_matrix(arr, arr[::-1])
    for i in range(6):
        for j in range(6):
            assert m[i, j] == pytest.approx(iou(BoundingBox.from_seq(arr[i]), BoundingBox.from_seq(arr[::-1][j])))


def test_invalid_boxes_rejected():
    with pytest.raises(InvalidBox):
        B(5, 0, 5, 10)
    with pytest.raises(InvalidBox):
        B(0, 0, 10, math.nan)


def test_encode_examples():
    assert bbox_encode(B(0, 0, 10, 10), B(0, 0, 10, 10)) == (0, 0, 0, 0)
    t = bbox_encode(B(0, 0, 10, 10), B(5, 5, 15, 15))
    assert tuple(t) == pytest.approx((0.5, 0.5, 0.0, 0.0))


def test_decode_examples():
    p = B(0, 0, 10, 10)
    assert bbox_decode(p, (0, 0, 0, 0), (100, 100)) == p
    assert bbox_decode(p, (0.5, 0.5, 0, 0), (100, 100)).as_tuple() == pytest.approx((5, 5, 15, 15))


def test_decode_clips_to_image():
    # shifted half a box out of the image: the part inside survives
    out = bbox_decode(B(90, 90, 100, 100), (0.5, 0.5, 0, 0), (100, 100))
    assert out.as_tuple() == pytest.approx((95, 95, 100, 100))


def test_decode_fully_outside_is_degenerate():
    # centre moves to (105, 105) with unit size 10: the box starts at the border
    with pytest.raises(DegenerateBox):
        bbox_decode(B(90, 90, 100, 100), (1.0, 1.0, 0, 0), (100, 100))


@settings(max_examples=200)
@given(boxes(), boxes())
def test_encode_decode_roundtrip(p, g):
    t = bbox_encode(p, g)
    assert all(math.isfinite(v) for v in t)
    out = bbox_decode(p, t, (200, 200))
    assert out.as_tuple() == pytest.approx(g.as_tuple(), rel=1e-9, abs=1e-9)


@given(boxes(100), boxes(100), st.integers(-50, 50), st.integers(-50, 50))
def test_encode_translation_equivariant(p, g, dx, dy):
    a = bbox_encode(p, g)
    b = bbox_encode(p.translate(dx, dy), g.translate(dx, dy))
    assert tuple(a) == pytest.approx(tuple(b), abs=1e-12)


def test_vectorised_encode_decode_agree_with_scalar():
    rng = np.random.default_rng(1)
    xy = rng.uniform(0, 50, (20, 2))
    wh = rng.uniform(1, 40, (20, 2))
    p = np.concatenate([xy, xy + wh], 1)
    xy = rng.uniform(0, 50, (20, 2))
    wh = rng.uniform(1, 40, (20, 2))
    g = np.concatenate([xy, xy + wh], 1)
    t = encode_boxes(p, g)
    for i in range(20):
        assert tuple(t[i]) == pytest.approx(tuple(bbox_encode(BoundingBox.from_seq(p[i]), BoundingBox.from_seq(g[i]))))
    assert decode_boxes(p, t, (1000, 1000)) == pytest.approx(g)


def test_detection_invariants():
    Detection(B(0, 0, 1, 1), 1, 0.5)
    with pytest.raises(ValueError):
        Detection(B(0, 0, 1, 1), 0, 0.5)
    with pytest.raises(ValueError):
        Detection(B(0, 0, 1, 1), 1, 1.5)


def test_brand_map():
    bm = BrandMap.from_pairs([("nike-1", "nike"), ("chanel-1", "chanel"), ("nike-2", "nike")])
    assert bm.n_classes == 3 and bm.n_brands == 2
    assert [bm.brand_of(c) for c in (1, 2, 3)] == [0, 1, 0]
    assert bm.class_id("nike-2") == 3
    with pytest.raises(KeyError):
        bm.brand_of(0)
    with pytest.raises(ValueError):
        BrandMap(("a",), ("x", "y"), (0,))  # brand y owns no class
