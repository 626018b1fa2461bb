"""Binary model checkpoints.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"LOGODET\\0"
    8       4     uint32 format version (currently 1)
    12      4     uint32 header length H in bytes
    16      H     UTF-8 JSON header
    16+H    ...   payload: little-endian float32 values, tensors back to back

The header holds the architecture and a layer manifest.  Each manifest entry
names one tensor and records its layer, layer type tag (``conv``, ``dense``,
``factored``, ``head`` or ``norm``), role, shape and float offset into the
payload.  A compressed trunk layer is tagged ``factored`` and stores the
roles ``first`` (t x v) and ``second`` (u x t) in place of a dense ``w``.
"""
from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .network import Arch, NetworkParams

MAGIC = b"LOGODET\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _layer_type(name: str, params: NetworkParams) -> str:
    layer = name.split(".")[0]
    if layer.startswith("conv"):
        return "conv"
    if layer.startswith("fc"):
        return "factored" if params.is_factored(int(layer[2:])) else "dense"
    if layer == "bboxnorm":
        return "norm"
    return "head"


def _arch_dict(arch: Arch) -> dict:
    return {
        "n_classes": arch.n_classes,
        "conv_channels": list(arch.conv_channels),
        "kernel": arch.kernel,
        "fc_dims": list(arch.fc_dims),
        "levels": [list(l) for l in arch.levels],
        "mode": arch.mode,
        "warp_size": arch.warp_size,
        "activation": arch.activation,
    }


def save_checkpoint(path, params: NetworkParams, extra: dict | None = None) -> None:
    tensors = dict(params.tensors)
    tensors["bboxnorm.mean"] = params.bbox_mean
    tensors["bboxnorm.std"] = params.bbox_std
    manifest = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        layer, role = name.split(".", 1)
        manifest.append({"name": name, "layer": layer, "type": _layer_type(name, params), "role": role,
                         "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.size
    header = json.dumps({"arch": _arch_dict(params.arch), "layers": manifest, "extra": extra or {}},
                        sort_keys=True).encode("utf-8")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)[0]


def _read_header(fh, path):
    magic = fh.read(8)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    raw = fh.read(8)
    if len(raw) != 8:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", raw)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(fh.read(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from None
    return header, 16 + hlen


def load_checkpoint(path) -> NetworkParams:
    with open(path, "rb") as fh:
        header, _ = _read_header(fh, path)
        payload = np.frombuffer(fh.read(), dtype="<f4")
    try:
        arch = Arch(**header["arch"])
    except (TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: bad architecture ({e})") from None
    tensors = {}
    for entry in header["layers"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        lo = entry["offset"]
        if lo < 0 or lo + n > payload.size:
            raise CheckpointError(f"{path}: tensor {entry['name']} runs past the payload")
        tensors[entry["name"]] = payload[lo:lo + n].reshape(entry["shape"]).astype(np.float32)
    mean = tensors.pop("bboxnorm.mean", np.zeros(4, np.float32))
    std = tensors.pop("bboxnorm.std", np.ones(4, np.float32))
    return NetworkParams(arch, tensors, mean, std)


def write_loss_trace(path, trace, window: int | None = None) -> None:
    """CSV of the per-iteration loss, with a running mean column if ``window`` is set."""
    trace = np.asarray(trace, dtype=np.float64)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "loss"] + (["smoothed"] if window else []))
        sm = None
        if window:
            # skipped iterations are NaN; average only the finite losses in each window
            ok = np.isfinite(trace)
            c = np.cumsum(np.concatenate([[0.0], np.where(ok, trace, 0.0)]))
            n = np.cumsum(np.concatenate([[0], ok]))
            idx = np.arange(1, len(trace) + 1)
            lo = np.maximum(0, idx - window)
            cnt = n[idx] - n[lo]
            sm = np.where(cnt > 0, (c[idx] - c[lo]) / np.maximum(cnt, 1), np.nan)
        for i, v in enumerate(trace):
            row = [i, f"{v:.6f}"]
            if sm is not None:
                row.append(f"{sm[i]:.6f}")
            w.writerow(row)
