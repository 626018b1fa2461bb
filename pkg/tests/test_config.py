import json

import pytest

from logodet.config import ConfigError, build_config, default_dict, load_config, shipped_config


def test_defaults_build():
    cfg = build_config({})
    assert cfg.arch.n_classes == cfg.data.n_classes
    assert cfg.threads == 1


def test_shipped_desk_config():
    cfg = load_config(shipped_config("desk"))
    assert (cfg.data.n_classes, cfg.data.n_brands, cfg.data.n_images) == (10, 5, 800)
    assert cfg.train.iterations == 2000
    assert cfg.proposals.top_k == 2000


def test_overrides_apply_and_change_digest():
    a = load_config(shipped_config(), ["train.iterations=5", "network.fc_dims=[32, 16]", "eval.interpolation=11point"])
    assert a.train.iterations == 5 and a.network.fc_dims == (32, 16)
    assert a.eval.interpolation == "11point"
    b = load_config(shipped_config())
    assert a.digest() != b.digest()
    assert b.digest() == load_config(shipped_config()).digest()


@pytest.mark.parametrize("override, path", [
    ("train.bogus=1", "train.bogus"),
    ("nosuch.key=1", "nosuch"),
    ("train.iterations=\"many\"", "train.iterations"),
    ("data.split=3", "data.split"),
    ("threads=0", "threads"),
])
def test_errors_name_the_key_path(override, path):
    with pytest.raises(ConfigError, match=rf"^{path}"):
        load_config(None, [override])


def test_semantic_error_names_section():
    with pytest.raises(ConfigError, match="^train"):
        load_config(None, ["train.fg_fraction=1.5"])


def test_file_errors(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{broken")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(p)
    p.write_text(json.dumps({"post": {"nms_iou": 0.4, "extra": 1}}))
    with pytest.raises(ConfigError, match=r"^post\.extra"):
        load_config(p)


def test_roundtrip_through_dict():
    cfg = load_config(shipped_config(), ["seed=3"])
    again = build_config(cfg.to_dict())
    assert again.digest() == cfg.digest() and again.seed == 3
    assert set(default_dict()) == set(cfg.to_dict())


def test_nullable_fields():
    cfg = load_config(None, ["svd.rank=null", "svd.energy=0.9"])
    assert cfg.svd.rank is None and cfg.svd.energy == 0.9
