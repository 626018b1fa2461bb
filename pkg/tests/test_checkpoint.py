import csv
import struct

import numpy as np
import pytest

from logodet.checkpoint import (
    MAGIC,
    CheckpointError,
    load_checkpoint,
    read_header,
    save_checkpoint,
    write_loss_trace,
)
from logodet.network import Arch, init_params
from logodet.svd import compress_network


def small_params():
    p = init_params(Arch(n_classes=3, conv_channels=(4, 8), fc_dims=(16, 12), levels=((1, 1), (2, 2))), seed=1)
    p.bbox_mean = np.array([0.1, -0.2, 0.0, 0.3], np.float32)
    p.bbox_std = np.array([0.1, 0.1, 0.2, 0.2], np.float32)
    return p


def same(a, b):
    assert a.arch == b.arch
    assert list(a.tensors) == list(b.tensors)
    for k in a.tensors:
        assert np.array_equal(a.tensors[k], b.tensors[k]), k
    assert np.array_equal(a.bbox_mean, b.bbox_mean) and np.array_equal(a.bbox_std, b.bbox_std)


def test_roundtrip(tmp_path):
    p = small_params()
    save_checkpoint(tmp_path / "m.ckpt", p, extra={"iterations": 5})
    same(load_checkpoint(tmp_path / "m.ckpt"), p)
    h = read_header(tmp_path / "m.ckpt")
    assert h["extra"] == {"iterations": 5}
    types = {e["name"]: e["type"] for e in h["layers"]}
    assert types["conv0.w"] == "conv" and types["fc1.w"] == "dense" and types["cls.b"] == "head"
    assert types["bboxnorm.std"] == "norm"


def test_roundtrip_factored(tmp_path):
    c = compress_network(small_params(), rank=4)
    save_checkpoint(tmp_path / "c.ckpt", c)
    back = load_checkpoint(tmp_path / "c.ckpt")
    same(back, c)
    assert back.is_factored(0) and back.is_factored(1)
    fc0 = [e for e in read_header(tmp_path / "c.ckpt")["layers"] if e["layer"] == "fc0"]
    assert {e["role"]: e["type"] for e in fc0} == {"first": "factored", "second": "factored", "b": "factored"}
    assert [e["shape"] for e in fc0 if e["role"] == "first"] == [[4, 8 * 5]]


def test_byte_layout(tmp_path):
    p = small_params()
    save_checkpoint(tmp_path / "m.ckpt", p)
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw[:8] == MAGIC
    version, hlen = struct.unpack("<II", raw[8:16])
    assert version == 1
    payload = np.frombuffer(raw[16 + hlen:], dtype="<f4")
    assert payload.size == p.n_parameters() + 8
    assert np.array_equal(payload[:p.tensors["conv0.w"].size], p.tensors["conv0.w"].ravel())


def test_bad_files(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + bytes(8))
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    save_checkpoint(tmp_path / "m.ckpt", small_params())
    raw = bytearray((tmp_path / "m.ckpt").read_bytes())
    raw[8:12] = struct.pack("<I", 99)
    bad.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version 99"):
        load_checkpoint(bad)
    raw = (tmp_path / "m.ckpt").read_bytes()
    bad.write_bytes(raw[:-40])
    with pytest.raises(CheckpointError, match="payload"):
        load_checkpoint(bad)


def test_loss_trace_csv(tmp_path):
    write_loss_trace(tmp_path / "l.csv", [4.0, np.nan, 2.0, 1.0], window=2)
    rows = list(csv.reader(open(tmp_path / "l.csv")))
    assert rows[0] == ["iteration", "loss", "smoothed"]
    assert [r[2] for r in rows[1:]] == ["4.000000", "4.000000", "2.000000", "1.500000"]
