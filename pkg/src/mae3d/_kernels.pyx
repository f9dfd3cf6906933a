# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled geometry kernels.

Every routine here has a numpy twin in ``_kernels_py`` and both must return
bit-identical results: distances are evaluated as ``dx*dx + dy*dy + dz*dz``
in double precision, left to right, and ties always resolve to the lowest
index.
"""
import numpy as np

from libc.math cimport INFINITY


def fps(const double[:, ::1] pts, Py_ssize_t n_samples, Py_ssize_t start):
    cdef Py_ssize_t n = pts.shape[0]
    cdef Py_ssize_t s, i, cur, best
    cdef double d, dx, dy, dz, best_d
    out = np.empty(n_samples, dtype=np.int64)
    mind_arr = np.full(n, INFINITY, dtype=np.float64)
    cdef long long[::1] o = out
    cdef double[::1] mind = mind_arr

    cur = start
    for s in range(n_samples):
        o[s] = cur
        mind[cur] = -1.0
        best = -1
        best_d = -INFINITY
        for i in range(n):
            if mind[i] < 0.0:
                continue
            dx = pts[i, 0] - pts[cur, 0]
            dy = pts[i, 1] - pts[cur, 1]
            dz = pts[i, 2] - pts[cur, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < mind[i]:
                mind[i] = d
            if mind[i] > best_d:
                best_d = mind[i]
                best = i
        cur = best
    return out


def knn(const double[:, ::1] pts, const double[:, ::1] queries, Py_ssize_t k):
    cdef Py_ssize_t n = pts.shape[0]
    cdef Py_ssize_t q = queries.shape[0]
    cdef Py_ssize_t a, i, j, filled
    cdef double d, dx, dy, dz
    out = np.empty((q, k), dtype=np.int64)
    buf_d_arr = np.empty(k, dtype=np.float64)
    cdef long long[:, ::1] o = out
    cdef double[::1] buf_d = buf_d_arr

    for a in range(q):
        filled = 0
        for i in range(n):
            dx = pts[i, 0] - queries[a, 0]
            dy = pts[i, 1] - queries[a, 1]
            dz = pts[i, 2] - queries[a, 2]
            d = dx * dx + dy * dy + dz * dz
            if filled == k:
                # strict: an equal distance arrives later, so it has the larger index
                if d >= buf_d[k - 1]:
                    continue
                j = k - 1
            else:
                j = filled
                filled += 1
            while j > 0 and buf_d[j - 1] > d:
                buf_d[j] = buf_d[j - 1]
                o[a, j] = o[a, j - 1]
                j -= 1
            buf_d[j] = d
            o[a, j] = i
    return out


def nearest(const double[:, ::1] src, const double[:, ::1] dst):
    """For each row of ``src`` the squared distance to, and index of, its nearest row in ``dst``."""
    cdef Py_ssize_t n = src.shape[0]
    cdef Py_ssize_t m = dst.shape[0]
    cdef Py_ssize_t i, j, best
    cdef double d, dx, dy, dz, best_d, sx, sy, sz
    dist = np.empty(n, dtype=np.float64)
    idx = np.empty(n, dtype=np.int64)
    cdef double[::1] dv = dist
    cdef long long[::1] iv = idx
    for i in range(n):
        sx = src[i, 0]
        sy = src[i, 1]
        sz = src[i, 2]
        best = 0
        best_d = INFINITY
        for j in range(m):
            dx = sx - dst[j, 0]
            dy = sy - dst[j, 1]
            dz = sz - dst[j, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < best_d:
                best_d = d
                best = j
        dv[i] = best_d
        iv[i] = best
    return dist, idx
