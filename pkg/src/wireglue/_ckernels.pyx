# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the combinatorial kernels in ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY

cnp.import_array()


def lsap_square(cost):
    cdef double[:, ::1] c = np.ascontiguousarray(cost, dtype=np.float64)
    cdef Py_ssize_t n = c.shape[0]
    if c.ndim != 2 or c.shape[1] != n:
        raise ValueError("lsap_square needs a square matrix")
    cdef double[::1] u = np.zeros(n + 1)
    cdef double[::1] v = np.zeros(n + 1)
    cdef double[::1] minv = np.empty(n + 1)
    cdef long long[::1] p = np.zeros(n + 1, dtype=np.int64)
    cdef long long[::1] way = np.zeros(n + 1, dtype=np.int64)
    cdef unsigned char[::1] used = np.zeros(n + 1, dtype=np.uint8)
    cdef Py_ssize_t i, j, j0, j1, i0
    cdef double delta, cur
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        for j in range(n + 1):
            minv[j] = INFINITY
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = p[j0]
            delta = INFINITY
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = c[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    out = np.full(n, -1, dtype=np.int64)
    cdef long long[::1] col_for_row = out
    for j in range(1, n + 1):
        if p[j] > 0:
            col_for_row[p[j] - 1] = j - 1
    return out


cdef Py_ssize_t _find(long long[::1] parent, Py_ssize_t a):
    while parent[a] != a:
        parent[a] = parent[parent[a]]
        a = parent[a]
    return a


def cluster_labels(points, double radius):
    cdef double[:, ::1] pts = np.ascontiguousarray(
        np.asarray(points, dtype=np.float64).reshape(-1, 2))
    cdef Py_ssize_t n = pts.shape[0]
    out = np.arange(n, dtype=np.int64)
    cdef long long[::1] parent = out
    cdef Py_ssize_t i, j, ri, rj
    cdef double dx, dy, r2 = radius * radius
    for i in range(n):
        for j in range(i + 1, n):
            dx = pts[i, 0] - pts[j, 0]
            dy = pts[i, 1] - pts[j, 1]
            if dx * dx + dy * dy <= r2:
                ri = _find(parent, i)
                rj = _find(parent, j)
                # keeping the smaller index as root makes the root the label
                if ri < rj:
                    parent[rj] = ri
                elif rj < ri:
                    parent[ri] = rj
    for i in range(n):
        parent[i] = _find(parent, i)
    return out


cdef inline double _seg_dist(double px, double py, double ax, double ay,
                             double bx, double by) nogil:
    cdef double abx = bx - ax, aby = by - ay
    cdef double len2 = abx * abx + aby * aby
    cdef double t = 0.0
    if len2 > 0:
        t = ((px - ax) * abx + (py - ay) * aby) / len2
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
    cdef double cx = ax + t * abx - px, cy = ay + t * aby - py
    return sqrt(cx * cx + cy * cy)


def point_segment_distance(pts, segs):
    cdef double[:, ::1] p = np.ascontiguousarray(
        np.asarray(pts, dtype=np.float64).reshape(-1, 2))
    cdef double[:, :, ::1] s = np.ascontiguousarray(
        np.asarray(segs, dtype=np.float64).reshape(-1, 2, 2))
    cdef Py_ssize_t n = p.shape[0], m = s.shape[0], i, j
    out = np.empty((n, m))
    cdef double[:, ::1] o = out
    for i in range(n):
        for j in range(m):
            o[i, j] = _seg_dist(p[i, 0], p[i, 1], s[j, 0, 0], s[j, 0, 1],
                                s[j, 1, 0], s[j, 1, 1])
    return out


def closeness_counts(samples, valid, segs, double thresh):
    arr = np.asarray(samples, dtype=np.float64)
    cdef Py_ssize_t m = arr.shape[0], k = arr.shape[1]
    cdef double[:, :, ::1] smp = np.ascontiguousarray(arr.reshape(m, k, 2))
    cdef unsigned char[:, ::1] ok = np.ascontiguousarray(
        np.asarray(valid, dtype=bool).reshape(m, k)).view(np.uint8)
    cdef double[:, :, ::1] s = np.ascontiguousarray(
        np.asarray(segs, dtype=np.float64).reshape(-1, 2, 2))
    cdef Py_ssize_t n = s.shape[0], i, j, q
    cdef long long cnt
    out = np.zeros((m, n), dtype=np.int64)
    cdef long long[:, ::1] o = out
    for i in range(m):
        for j in range(n):
            cnt = 0
            for q in range(k):
                if ok[i, q] and _seg_dist(smp[i, q, 0], smp[i, q, 1], s[j, 0, 0],
                                          s[j, 0, 1], s[j, 1, 0], s[j, 1, 1]) < thresh:
                    cnt += 1
            o[i, j] = cnt
    return out
