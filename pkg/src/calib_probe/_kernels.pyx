# cython: language_level=3, boundscheck=False, wraparound=False, initializedcheck=False, cdivision=True
"""Compiled hot kernels. Semantics mirror ``_kernels_py`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()

DEF NO_HIT = -1
DEF GROUND = 0


def zbuffer(cnp.int64_t[::1] cols, cnp.int64_t[::1] rows, cnp.float32_t[::1] depth,
            Py_ssize_t height, Py_ssize_t width):
    cdef cnp.ndarray[cnp.float32_t, ndim=2] out_arr = np.zeros((height, width), dtype=np.float32)
    cdef cnp.float32_t[:, ::1] out = out_arr
    cdef Py_ssize_t i, n = depth.shape[0]
    cdef cnp.float32_t d, cur
    with nogil:
        for i in range(n):
            d = depth[i]
            cur = out[rows[i], cols[i]]
            if cur == 0 or d < cur:
                out[rows[i], cols[i]] = d
    return out_arr


def raycast(double[:, ::1] origins, double[:, ::1] dirs, double[:, ::1] box_min,
            double[:, ::1] box_max, bint ground, double max_range):
    cdef Py_ssize_t n = origins.shape[0], m = box_min.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] t_arr = np.empty(n, dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] hit_arr = np.empty(n, dtype=np.int64)
    cdef double[::1] t_out = t_arr
    cdef cnp.int64_t[::1] hit_out = hit_arr
    cdef Py_ssize_t r, b, a
    cdef double best, tg, tnear, tfar, t0, t1, lo, hi, inv, o, tcand
    cdef cnp.int64_t h
    cdef double eps = 1e-9
    cdef bint empty
    with nogil:
        for r in range(n):
            best = INFINITY
            h = NO_HIT
            if ground and dirs[r, 2] < 0.0:
                tg = -origins[r, 2] / dirs[r, 2]
                if tg > eps and tg <= max_range:
                    best = tg
                    h = GROUND
            for b in range(m):
                tnear = -INFINITY
                tfar = INFINITY
                empty = False
                for a in range(3):
                    o = origins[r, a]
                    if dirs[r, a] == 0.0:
                        if o < box_min[b, a] or o > box_max[b, a]:
                            empty = True
                            break
                        continue
                    inv = 1.0 / dirs[r, a]
                    t0 = (box_min[b, a] - o) * inv
                    t1 = (box_max[b, a] - o) * inv
                    if t0 < t1:
                        lo = t0
                        hi = t1
                    else:
                        lo = t1
                        hi = t0
                    if lo > tnear:
                        tnear = lo
                    if hi < tfar:
                        tfar = hi
                if empty or tnear > tfar:
                    continue
                tcand = tnear if tnear > eps else tfar
                if tcand > eps and tcand <= max_range and tcand < best:
                    best = tcand
                    h = b + 1
            t_out[r] = best
            hit_out[r] = h
    return t_arr, hit_arr


def densify_min(raster, int kernel):
    """Minimum valid depth over a square window, separable (row pass, then column pass)."""
    cdef cnp.ndarray[cnp.float32_t, ndim=2] src_arr = np.ascontiguousarray(raster, dtype=np.float32)
    cdef cnp.float32_t[:, ::1] src = src_arr
    cdef Py_ssize_t h = src.shape[0], w = src.shape[1]
    cdef int rad = kernel // 2
    cdef cnp.ndarray[cnp.float32_t, ndim=2] out_arr = src_arr.copy()
    cdef cnp.ndarray[cnp.float32_t, ndim=2] tmp_arr = np.empty((h, w), dtype=np.float32)
    cdef cnp.float32_t[:, ::1] out = out_arr
    cdef cnp.float32_t[:, ::1] tmp = tmp_arr
    cdef Py_ssize_t y, x, i, lo, hi
    cdef cnp.float32_t best, v
    with nogil:
        for y in range(h):
            for x in range(w):
                lo = x - rad if x >= rad else 0
                hi = x + rad + 1 if x + rad + 1 <= w else w
                best = INFINITY
                for i in range(lo, hi):
                    v = src[y, i]
                    if v > 0 and v < best:
                        best = v
                tmp[y, x] = best
        for y in range(h):
            lo = y - rad if y >= rad else 0
            hi = y + rad + 1 if y + rad + 1 <= h else h
            for x in range(w):
                if src[y, x] > 0:
                    continue
                best = INFINITY
                for i in range(lo, hi):
                    v = tmp[i, x]
                    if v < best:
                        best = v
                if best < INFINITY:
                    out[y, x] = best
    return out_arr
