"""Kernel backend selection.

The compiled extension is preferred; ``DENSE_ALIGN_PURE=1`` forces the numpy
fallback, which is also used when the extension was not built.
"""
import os

from . import _kernels_py

if os.environ.get("DENSE_ALIGN_PURE", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "compiled"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

enumerate_paths = _impl.enumerate_paths
discounted_path_sums = _impl.discounted_path_sums
min_pairwise_gap = _impl.min_pairwise_gap

__all__ = ["BACKEND", "enumerate_paths", "discounted_path_sums", "min_pairwise_gap"]
