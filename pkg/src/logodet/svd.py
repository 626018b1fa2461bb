"""Truncated-SVD compression of fully connected layers.

A dense layer ``y = W x + b`` with ``W`` of shape ``(u, v)`` is replaced by
two stacked maps ``y = U_t (S_t V_t^T x) + b``: ``t (u + v)`` multiply-adds
instead of ``u v``.  The decomposition is a one-sided Jacobi SVD.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass

import numpy as np

from .network import NetworkParams, heads_from_trunk, trunk_forward


class RankOutOfRange(ValueError):
    pass


def _round_robin(n: int):
    """Tournament schedule: ``n - 1`` rounds of ``n / 2`` disjoint pairs (n even)."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        p = np.array(players[:half])
        q = np.array(players[half:][::-1])
        rounds.append((np.minimum(p, q), np.maximum(p, q)))
        players = [players[0], players[-1], *players[1:-1]]
    return rounds


def jacobi_svd(a: np.ndarray, tol: float = 1e-13, max_sweeps: int = 80):
    """Thin SVD ``a = U diag(s) V^T`` by one-sided (Hestenes) Jacobi rotations.

    Column pairs are orthogonalised in round-robin order, ``n / 2`` disjoint
    pairs at a time.  Singular values are returned in descending order.
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise ValueError("need a non-empty matrix")
    transposed = a.shape[0] < a.shape[1]
    if transposed:
        a = a.T
    m, n = a.shape
    n_even = n + (n % 2)
    work = np.zeros((m, n_even))
    work[:, :n] = a
    v = np.eye(n_even)
    rounds = _round_robin(n_even)
    for _ in range(max_sweeps):
        rotated = False
        for p, q in rounds:
            x = work[:, p]
            y = work[:, q]
            alpha = np.einsum("ij,ij->j", x, x)
            beta = np.einsum("ij,ij->j", y, y)
            gamma = np.einsum("ij,ij->j", x, y)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not active.any():
                continue
            rotated = True
            g = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2 * g)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1 + zeta * zeta))
            t = np.where(zeta == 0, 1.0, t)
            c = np.where(active, 1 / np.sqrt(1 + t * t), 1.0)
            s = np.where(active, c * t, 0.0)
            work[:, p] = c * x - s * y
            work[:, q] = s * x + c * y
            vp = v[:, p]
            vq = v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if not rotated:
            break
    work = work[:, :n]
    v = v[:n, :n]
    sv = np.linalg.norm(work, axis=0)
    order = np.argsort(-sv, kind="stable")
    sv = sv[order]
    v = v[:, order]
    u = work[:, order] / np.where(sv > 0, sv, 1.0)
    if transposed:
        return v, sv, u.T
    return u, sv, v.T


@dataclass
class CompressedLayer:
    first: np.ndarray   # (t, v) = S_t V_t^T
    second: np.ndarray  # (u, t) = U_t
    bias: np.ndarray    # (u,), applied after the second factor

    @property
    def rank(self) -> int:
        return self.first.shape[0]

    def forward(self, x: np.ndarray) -> np.ndarray:
        """``x``: (N, v) rows -> (N, u)."""
        return (x @ self.first.T) @ self.second.T + self.bias

    def weight(self) -> np.ndarray:
        return self.second @ self.first


def rank_for_energy(singular_values: np.ndarray, fraction: float) -> int:
    """Smallest rank keeping ``fraction`` of the squared spectral energy."""
    if not 0 < fraction <= 1:
        raise ValueError("energy fraction must be in (0, 1]")
    e = np.cumsum(np.asarray(singular_values, dtype=np.float64) ** 2)
    if e[-1] == 0:
        return 1
    return int(np.searchsorted(e / e[-1], fraction - 1e-12) + 1)


def compress_fc(w: np.ndarray, rank: int, bias: np.ndarray | None = None) -> CompressedLayer:
    w = np.asarray(w, dtype=np.float64)
    u_dim, v_dim = w.shape
    if not 1 <= rank <= min(u_dim, v_dim):
        raise RankOutOfRange(f"rank {rank} outside [1, {min(u_dim, v_dim)}]")
    u, s, vt = jacobi_svd(w)
    first = s[:rank, None] * vt[:rank]
    second = u[:, :rank]
    b = np.zeros(u_dim) if bias is None else np.asarray(bias, dtype=np.float64)
    return CompressedLayer(first, second, b)


def fc_flops(u: int, v: int) -> int:
    return u * v


def compressed_flops(u: int, v: int, t: int) -> int:
    return t * (u + v)


def resolve_rank(u: int, v: int, rank: int | None = None, rank_fraction: float | None = None,
                 energy: float | None = None, singular_values: np.ndarray | None = None) -> int:
    full = min(u, v)
    if rank is not None:
        return int(rank)
    if rank_fraction is not None:
        return max(1, int(math.ceil(rank_fraction * full)))
    if energy is not None:
        if singular_values is None:
            raise ValueError("energy-based rank needs singular values")
        return rank_for_energy(singular_values, energy)
    return full


def compress_network(params: NetworkParams, rank: int | None = None, rank_fraction: float | None = None,
                     energy: float | None = None) -> NetworkParams:
    """Factor every dense trunk layer; heads and conv layers are left untouched."""
    out = params.copy()
    dtype = params.dtype
    for i in range(len(params.arch.fc_dims)):
        if params.is_factored(i):
            continue
        w = params.tensors[f"fc{i}.w"].astype(np.float64)
        u_dim, v_dim = w.shape
        sv = jacobi_svd(w)[1] if energy is not None and rank is None and rank_fraction is None else None
        t = resolve_rank(u_dim, v_dim, rank, rank_fraction, energy, sv)
        layer = compress_fc(w, min(t, min(u_dim, v_dim)))
        del out.tensors[f"fc{i}.w"]
        out.tensors[f"fc{i}.first"] = layer.first.astype(dtype)
        out.tensors[f"fc{i}.second"] = layer.second.astype(dtype)
    # keep a stable tensor order: trunk layers in place of their dense weights
    order = []
    for k in params.tensors:
        if k.endswith(".w") and k.startswith("fc") and k not in out.tensors:
            stem = k[:-2]
            order += [f"{stem}.first", f"{stem}.second"]
        elif k in out.tensors:
            order.append(k)
    out.tensors = {k: out.tensors[k] for k in order}
    return out


def trunk_flops(params: NetworkParams) -> int:
    total = 0
    for i in range(len(params.arch.fc_dims)):
        if params.is_factored(i):
            t, v = params.tensors[f"fc{i}.first"].shape
            u = params.tensors[f"fc{i}.second"].shape[0]
            total += compressed_flops(u, v, t)
        else:
            u, v = params.tensors[f"fc{i}.w"].shape
            total += fc_flops(u, v)
    return total


def time_trunk(params: NetworkParams, n_rois: int = 2000, repeats: int = 30, seed: int = 0) -> float:
    """Median wall time (s) of the FC trunk on a batch of ``n_rois`` pooled features."""
    x = np.random.default_rng(seed).random((n_rois, params.arch.pooled_dim)).astype(params.dtype)
    trunk_forward(params, x)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        trunk_forward(params, x)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def argmax_agreement(params: NetworkParams, compressed: NetworkParams, features: np.ndarray) -> float:
    """Fraction of pooled RoI features whose classifier arg-max is unchanged."""
    if len(features) == 0:
        return 1.0
    a = heads_from_trunk(params, trunk_forward(params, features))[0].argmax(axis=1)
    b = heads_from_trunk(compressed, trunk_forward(compressed, features))[0].argmax(axis=1)
    return float(np.mean(a == b))


@dataclass
class CompressionReport:
    base: dict          # mAP / accuracy / auc in percent
    compressed: dict
    argmax_agreement: float
    fc_seconds: tuple[float, float]      # FC-trunk median time, base vs compressed
    image_seconds: tuple[float, float]   # mean per-image network time
    flops: tuple[int, int]

    @property
    def deltas(self) -> dict:
        return {k: self.compressed[k] - self.base[k] for k in self.base}

    @property
    def fc_latency_ratio(self) -> float:
        return self.fc_seconds[1] / self.fc_seconds[0]

    @property
    def image_latency_ratio(self) -> float:
        return self.image_seconds[1] / self.image_seconds[0]


def compare_compressed(params: NetworkParams, compressed: NetworkParams, ds, proposals, cfg,
                       n_rois: int = 2000, repeats: int = 30) -> CompressionReport:
    """Evaluate both networks on ``ds`` and time their FC trunks."""
    from .network import roi_features
    from .pipeline import evaluate_run, run_detection

    summaries = []
    image_times = []
    for p in (params, compressed):
        run = run_detection(p, ds, proposals, cfg)
        s = evaluate_run(ds, run.detections, run.brands, cfg.eval.iou, cfg.eval.interpolation)
        summaries.append({"mAP": 100 * s.map, "accuracy": 100 * s.accuracy.micro, "auc": 100 * s.auc})
        image_times.append(float(np.mean(run.times["network"])))
    feats = np.concatenate([roi_features(params, ds.load_image(i), proposals[i]) for i in range(len(ds))])
    agree = argmax_agreement(params, compressed, feats)
    fc = (time_trunk(params, n_rois, repeats), time_trunk(compressed, n_rois, repeats))
    return CompressionReport(summaries[0], summaries[1], agree, fc, tuple(image_times),
                             (trunk_flops(params), trunk_flops(compressed)))


def write_compression_csv(path, rep: CompressionReport) -> None:
    """Rows base / compressed / delta."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "mAP", "accuracy", "auc", "argmax_agreement", "fc_flops"])
        w.writerow(["base", *(f"{rep.base[k]:.2f}" for k in ("mAP", "accuracy", "auc")), "", rep.flops[0]])
        w.writerow(["compressed", *(f"{rep.compressed[k]:.2f}" for k in ("mAP", "accuracy", "auc")),
                    f"{100 * rep.argmax_agreement:.2f}", rep.flops[1]])
        d = rep.deltas
        w.writerow(["delta", *(f"{d[k]:.2f}" for k in ("mAP", "accuracy", "auc")), "",
                    rep.flops[1] - rep.flops[0]])
