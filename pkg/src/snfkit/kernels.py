"""Backend selection for the hot pair-distance kernels.

The compiled Cython module is used when it was built; otherwise the numpy
fallback is imported. Setting ``SNFKIT_PURE_PYTHON=1`` forces the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"

if os.environ.get("SNFKIT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py
else:
    _impl = _kernels_py

cross_distance_sum = _impl.cross_distance_sum
self_distance_sum = _impl.self_distance_sum

__all__ = ["BACKEND", "cross_distance_sum", "self_distance_sum"]
