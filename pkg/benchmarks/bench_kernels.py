"""Compiled kernels vs the pure-Python fallback on desk-sized inputs.

    python benchmarks/bench_kernels.py [--repeats N]

Both implementations are imported directly, so the comparison does not depend
on ``LOGODET_PURE``.  Outputs are checked for equality before timing.
"""
import argparse
import timeit

import numpy as np

from logodet import _fallback
from logodet.proposals import _edges

try:
    from logodet import _core
except ImportError:
    _core = None


def cases(rng):
    # graph segmentation of a 256x256 image (8-connected grid graph)
    img = rng.random((256, 256, 3))
    src, dst, w = _edges(img)
    order = np.argsort(w, kind="stable")
    src, dst, w = (np.ascontiguousarray(a[order]) for a in (src, dst, w))
    n = 256 * 256
    yield "segment_graph 256x256", lambda m: m.segment_graph(n, src, dst, w, 100.0, 20)

    # 2000 RoIs on a 32x32x64 feature map
    xy = rng.uniform(0, 200, (2000, 2))
    rois = np.ascontiguousarray(np.concatenate([xy, xy + rng.uniform(8, 56, (2000, 2))], axis=1))
    yield "roi_windows 2000", lambda m: m.roi_windows(rois, 8.0, 32, 32)

    feat = rng.normal(size=(32, 32, 64)).astype(np.float32)
    win = np.ascontiguousarray(_fallback.roi_windows(rois, 8.0, 32, 32), dtype=np.intp)
    yield "roi_pool_forward 2000x4x4", lambda m: m.roi_pool_forward(feat, win, 4, 4)

    _, arg = _fallback.roi_pool_forward(feat, win[:64], 4, 4)
    arg = np.ascontiguousarray(arg)
    grad = rng.normal(size=arg.shape).astype(np.float32)
    yield "roi_pool_backward 64x4x4", lambda m: m.roi_pool_backward(grad, arg, 32, 32)


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()
    if _core is None:
        raise SystemExit("compiled core not built; run `pip install -e . --no-build-isolation` first")
    rng = np.random.default_rng(0)
    print(f"{'kernel':28s} {'cython ms':>10s} {'python ms':>10s} {'speed-up':>9s}")
    for name, fn in cases(rng):
        if not same(fn(_core), fn(_fallback)):
            raise SystemExit(f"{name}: implementations disagree")
        t_c = min(timeit.repeat(lambda: fn(_core), number=1, repeat=args.repeats))
        t_p = min(timeit.repeat(lambda: fn(_fallback), number=1, repeat=args.repeats))
        print(f"{name:28s} {1000 * t_c:10.2f} {1000 * t_p:10.2f} {t_p / t_c:8.1f}x")


if __name__ == "__main__":
    main()
