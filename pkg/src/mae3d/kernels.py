"""Geometry kernel dispatch.

The compiled Cython core is used when it was built; otherwise the numpy
fallback is loaded. Set ``MAE3D_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _kernels_py

if os.environ.get("MAE3D_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py
        BACKEND = "python"


def _as_points(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"expected an (N, 3) point array, got shape {a.shape}")
    return a


def fps(points, n_samples, start=0):
    return _impl.fps(_as_points(points), int(n_samples), int(start))


def knn(points, queries, k):
    return _impl.knn(_as_points(points), _as_points(queries), int(k))


def nearest(src, dst):
    return _impl.nearest(_as_points(src), _as_points(dst))
