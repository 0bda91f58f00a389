"""Pure-numpy versions of the hot kernels.

Behaviour must match ``_kernels.pyx`` bit-for-bit; the test suite runs both
implementations against each other.
"""

import numpy as np

NO_HIT = -1
GROUND = 0


def zbuffer(cols, rows, depth, height, width):
    """Scatter depths into a ``height x width`` float32 raster keeping the minimum.

    ``cols``/``rows`` are int64 pixel indices already inside the raster.
    Empty pixels are 0.
    """
    out = np.full(height * width, np.inf, dtype=np.float32)
    if len(depth):
        flat = rows.astype(np.int64) * width + cols.astype(np.int64)
        np.minimum.at(out, flat, depth.astype(np.float32))
    out[np.isinf(out)] = 0.0
    return out.reshape(height, width)


def raycast(origins, dirs, box_min, box_max, ground, max_range):
    """Nearest hit of each ray against the ground plane z=0 and axis-aligned boxes.

    Returns ``(t, hit)`` where ``t`` is the ray parameter (distance for unit
    directions) and ``hit`` is -1 for a miss, 0 for the ground, ``i + 1`` for
    box ``i``. Hits must satisfy ``1e-9 < t <= max_range``.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n = len(origins)
    t_best = np.full(n, np.inf)
    hit = np.full(n, NO_HIT, dtype=np.int64)
    eps = 1e-9

    if ground:
        dz = dirs[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            tg = np.where(dz < 0.0, -origins[:, 2] / dz, np.inf)
        ok = (tg > eps) & (tg <= max_range)
        t_best[ok] = tg[ok]
        hit[ok] = GROUND

    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    for i in range(len(box_min)):
        t0 = (box_min[i] - origins) * inv
        t1 = (box_max[i] - origins) * inv
        lo = np.minimum(t0, t1)
        hi = np.maximum(t0, t1)
        # zero direction components: inside slab -> (-inf, inf), outside -> empty
        par = dirs == 0.0
        if par.any():
            inside = (origins >= box_min[i]) & (origins <= box_max[i])
            lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
            hi = np.where(par, np.where(inside, np.inf, -np.inf), hi)
        tnear = lo.max(axis=1)
        tfar = hi.min(axis=1)
        # origin inside a box: the exit face is the first visible surface
        tcand = np.where(tnear > eps, tnear, tfar)
        ok = (tnear <= tfar) & (tcand > eps) & (tcand <= max_range) & (tcand < t_best)
        t_best[ok] = tcand[ok]
        hit[ok] = i + 1

    t_best[hit == NO_HIT] = np.inf
    return t_best, hit


def densify_min(raster, kernel):
    """Fill empty pixels with the minimum valid depth in a ``kernel x kernel`` window."""
    h, w = raster.shape
    r = kernel // 2
    src = np.where(raster > 0, raster, np.inf).astype(np.float32)
    padded = np.full((h + 2 * r, w + 2 * r), np.inf, dtype=np.float32)
    padded[r:r + h, r:r + w] = src
    best = np.full((h, w), np.inf, dtype=np.float32)
    for dy in range(kernel):
        for dx in range(kernel):
            np.minimum(best, padded[dy:dy + h, dx:dx + w], out=best)
    out = raster.astype(np.float32, copy=True)
    fill = (raster <= 0) & np.isfinite(best)
    out[fill] = best[fill]
    return out
