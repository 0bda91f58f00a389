"""Kernel dispatch: compiled extension when importable, numpy fallback otherwise.

Set ``CALIB_PROBE_PURE=1`` to force the fallback (useful for benchmarking and
for checking that both paths agree).
"""

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("CALIB_PROBE_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

NO_HIT = _kernels_py.NO_HIT
GROUND = _kernels_py.GROUND


def zbuffer(cols, rows, depth, height, width):
    return _impl.zbuffer(
        np.ascontiguousarray(cols, dtype=np.int64),
        np.ascontiguousarray(rows, dtype=np.int64),
        np.ascontiguousarray(depth, dtype=np.float32),
        int(height),
        int(width),
    )


def raycast(origins, dirs, box_min, box_max, ground=True, max_range=np.inf):
    return _impl.raycast(
        np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3),
        np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3),
        np.ascontiguousarray(box_min, dtype=np.float64).reshape(-1, 3),
        np.ascontiguousarray(box_max, dtype=np.float64).reshape(-1, 3),
        bool(ground),
        float(max_range),
    )


def densify_min(raster, kernel):
    return _impl.densify_min(np.asarray(raster, dtype=np.float32), int(kernel))
