import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from logodet.boxes import BoundingBox, BrandMap
from logodet.dataset import (
    Annotation,
    Dataset,
    InvalidFractions,
    ParseError,
    ValidationError,
    dataset_stats,
    load_dataset,
    save_dataset,
    save_split,
    split_dataset,
    split_sizes,
    write_stats_csv,
)


def small_map():
    return BrandMap.from_pairs([("nike-1", "nike"), ("nike-2", "nike"), ("chanel-1", "chanel")])


def two_image_dataset():
    bm = small_map()
    rng = np.random.default_rng(0)
    anns = [
        Annotation("images/a.png", 40, 30, ((BoundingBox(1, 2, 11, 12), 1), (BoundingBox(20, 5, 39, 29), 3))),
        Annotation("images/b.png", 20, 20, ()),
    ]
    imgs = {a.image_path: rng.integers(0, 256, (a.height, a.width, 3), dtype=np.uint8) for a in anns}
    return Dataset(anns, bm, images=imgs)


def test_save_load_roundtrip(tmp_path):
    ds = two_image_dataset()
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    assert back == ds
    assert len(back) == 2
    assert back.annotations[1].objects == ()  # empty object list preserved
    for i in range(2):
        assert np.array_equal(back.load_image(i), ds.load_image(i))


def test_unicode_class_names_roundtrip(tmp_path):
    bm = BrandMap.from_pairs([("ロゴ-1", "ブランド"), ("café-2", "crème")])
    ds = Dataset([Annotation("x.png", 10, 10, ((BoundingBox(0, 0, 5, 5), 2),))], bm)
    save_dataset(ds, tmp_path)
    raw = (tmp_path / "classes.tsv").read_bytes()
    assert "ロゴ-1\tブランド".encode() in raw
    assert load_dataset(tmp_path) == ds


def test_empty_annotation_file(tmp_path):
    save_dataset(Dataset([], small_map()), tmp_path)
    assert len(load_dataset(tmp_path)) == 0


def _write(tmp_path, lines):
    (tmp_path / "classes.tsv").write_text("nike-1\tnike\n", encoding="utf-8")
    (tmp_path / "annotations.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")


def test_box_outside_image_names_the_image(tmp_path):
    rec = {"image": "bad.png", "width": 10, "height": 10, "objects": [{"bbox": [0, 0, 12, 5], "cls": "nike-1"}]}
    _write(tmp_path, [json.dumps(rec)])
    with pytest.raises(ValidationError, match="bad.png"):
        load_dataset(tmp_path)


def test_unknown_class_rejected(tmp_path):
    rec = {"image": "a.png", "width": 10, "height": 10, "objects": [{"bbox": [0, 0, 5, 5], "cls": "puma"}]}
    _write(tmp_path, [json.dumps(rec)])
    with pytest.raises(ValidationError, match="puma"):
        load_dataset(tmp_path)


def test_parse_error_reports_line(tmp_path):
    ok = {"image": "a.png", "width": 10, "height": 10, "objects": []}
    _write(tmp_path, [json.dumps(ok), "{not json"])
    with pytest.raises(ParseError, match=r"annotations.jsonl:2"):
        load_dataset(tmp_path)


def test_duplicate_image_rejected():
    a = Annotation("a.png", 10, 10, ())
    with pytest.raises(ValidationError):
        Dataset([a, a], small_map())


# ----------------------------------------------------------------- splits

def test_split_sizes_table_scale():
    assert split_sizes(8460, (0.5, 0.2, 0.3)) == (4230, 1692, 2538)


def test_split_sizes_floor_rule():
    assert split_sizes(10, (0.55, 0.25, 0.2)) == (5, 2, 3)
    assert split_sizes(800, (0.625, 0.125, 0.25)) == (500, 100, 200)


def test_split_bad_fractions():
    with pytest.raises(InvalidFractions):
        split_sizes(10, (0.5, 0.5, 0.5))
    with pytest.raises(InvalidFractions):
        split_sizes(10, (1.2, -0.2, 0.0))


def _dummy(n):
    bm = BrandMap.from_pairs([("a", "A")])
    return Dataset([Annotation(f"{i}.png", 8, 8, ((BoundingBox(0, 0, 4, 4), 1),)) for i in range(n)], bm)


def test_split_all_train():
    tr, va, te = split_dataset(_dummy(7), (1, 0, 0))
    assert (len(tr), len(va), len(te)) == (7, 0, 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 60), st.integers(0, 1000))
def test_split_is_a_partition_and_deterministic(n, seed):
    ds = _dummy(n)
    parts = split_dataset(ds, (0.5, 0.2, 0.3), seed)
    names = [a.image_path for p in parts for a in p.annotations]
    assert sorted(names) == sorted(a.image_path for a in ds.annotations)
    assert len(set(names)) == n
    again = split_dataset(ds, (0.5, 0.2, 0.3), seed)
    assert all(p == q for p, q in zip(parts, again))


def test_save_split_roundtrip(tmp_path):
    ds = two_image_dataset()
    save_dataset(ds, tmp_path)
    save_split(ds.subset([1]), tmp_path, "test")
    assert [a.image_path for a in load_dataset(tmp_path, "test").annotations] == ["images/b.png"]


# ----------------------------------------------------------------- stats

def table1_fixture():
    """Manifest with the aggregates of the 18-class benchmark set (no pixels)."""
    n_images, n_objects, n_classes, n_brands = 8460, 16043, 18, 10
    bm = BrandMap.from_pairs([(f"logo{c}", f"brand{c % n_brands}") for c in range(n_classes)])
    extra = n_objects - n_images  # images that carry a second logo
    anns = []
    k = 0
    for i in range(n_images):
        objs = []
        for j in range(2 if i < extra else 1):
            objs.append((BoundingBox(10 + 100 * j, 10, 60 + 100 * j, 60), k % n_classes + 1))
            k += 1
        anns.append(Annotation(f"img{i}.jpg", 564, 498, tuple(objs)))
    return Dataset(anns, bm)


def test_table1_fixture_stats():
    st_ = dataset_stats(table1_fixture())
    assert st_.n_images == 8460
    assert st_.n_objects == 16043
    assert st_.n_classes == 18
    assert st_.n_brands == 10
    assert round(st_.mean_width) == 564
    assert round(st_.mean_height) == 498
    assert sum(st_.class_counts.values()) == st_.n_objects


def test_stats_single_image():
    bm = BrandMap.from_pairs([("a", "A")])
    st_ = dataset_stats(Dataset([Annotation("x.png", 100, 200, ((BoundingBox(0, 0, 5, 5), 1),))], bm))
    assert (st_.mean_width, st_.mean_height, st_.n_objects) == (100, 200, 1)


def test_stats_hand_count():
    bm = small_map()
    b = BoundingBox(0, 0, 2, 2)
    anns = [
        Annotation("1", 10, 10, ((b, 1), (b.translate(3, 3), 2))),  # nike twice
        Annotation("2", 10, 10, ((b, 3),)),                         # chanel
        Annotation("3", 10, 10, ((b, 1), (b.translate(5, 0), 3))),  # nike + chanel
    ]
    st_ = dataset_stats(Dataset(anns, bm))
    assert st_.class_counts == {"nike-1": 2, "nike-2": 1, "chanel-1": 2}
    assert st_.brand_image_counts == {"nike": 2, "chanel": 2}


def test_stats_invariant_to_order(tmp_path):
    ds = table1_fixture().subset(range(50))
    rev = ds.subset(range(len(ds) - 1, -1, -1))
    assert dataset_stats(ds) == dataset_stats(rev)
    write_stats_csv(dataset_stats(ds), tmp_path / "s.csv")
    assert "total,objects,100" in (tmp_path / "s.csv").read_text()
