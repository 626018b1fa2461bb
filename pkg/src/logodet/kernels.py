"""Kernel dispatch: the compiled ``_core`` extension when importable, else numpy.

Set ``LOGODET_PURE=1`` to force the fallback (used by the benchmark and the
equivalence tests).  ``BACKEND`` names the implementation in use.
"""
import os

from . import _fallback

if os.environ.get("LOGODET_PURE"):
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _core as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _fallback
        BACKEND = "python"

segment_graph = _impl.segment_graph
roi_windows = _impl.roi_windows
roi_pool_forward = _impl.roi_pool_forward
roi_pool_backward = _impl.roi_pool_backward

__all__ = ["BACKEND", "segment_graph", "roi_windows", "roi_pool_forward", "roi_pool_backward"]
