"""Pure-Python/numpy versions of the compiled kernels in ``_ckernels.pyx``.

Both modules must agree exactly; tests run every kernel through both.
"""
from __future__ import annotations

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components


def lsap_square(cost):
    """Min-cost perfect assignment of a finite square matrix.

    Shortest augmenting path with row/column potentials (Jonker-Volgenant
    style). Returns ``col_for_row`` as an int64 array.
    """
    c = np.ascontiguousarray(cost, dtype=np.float64)
    n = c.shape[0]
    if c.ndim != 2 or c.shape[1] != n:
        raise ValueError("lsap_square needs a square matrix")
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)    # p[j]: row (1-based) owning column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = c[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            used_idx = np.flatnonzero(used)
            u[p[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    col_for_row = np.full(n, -1, dtype=np.int64)
    for j in range(1, n + 1):
        if p[j] > 0:
            col_for_row[p[j] - 1] = j - 1
    return col_for_row


def cluster_labels(points, radius):
    """Single-linkage clusters under ``dist <= radius``.

    Each point is labelled with the smallest index in its cluster.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    diff = pts[:, None, :] - pts[None, :, :]
    d2 = (diff ** 2).sum(axis=2)
    rows, cols = np.nonzero(np.triu(d2 <= radius * radius, k=1))
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    first = np.full(comp.max() + 1, n, dtype=np.int64)
    np.minimum.at(first, comp, np.arange(n))
    return first[comp]


def point_segment_distance(pts, segs):
    """Distance from each point (n, 2) to each segment (m, 2, 2) -> (n, m).

    Perpendicular distance when the foot falls on the segment, otherwise the
    distance to the nearer endpoint.
    """
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    segs = np.asarray(segs, dtype=np.float64).reshape(-1, 2, 2)
    a = segs[None, :, 0, :]
    ab = segs[None, :, 1, :] - a
    ap = pts[:, None, :] - a
    len2 = (ab ** 2).sum(axis=2)
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(len2 > 0, (ap * ab).sum(axis=2) / len2, 0.0)
    t = np.clip(t, 0.0, 1.0)
    closest = a + t[..., None] * ab
    return np.sqrt(((pts[:, None, :] - closest) ** 2).sum(axis=2))


def closeness_counts(samples, valid, segs, thresh):
    """``out[i, j]`` = number of valid samples of line ``i`` closer than
    ``thresh`` to segment ``j``."""
    samples = np.asarray(samples, dtype=np.float64)
    m, k = samples.shape[:2]
    segs = np.asarray(segs, dtype=np.float64).reshape(-1, 2, 2)
    n = len(segs)
    if m == 0 or n == 0 or k == 0:
        return np.zeros((m, n), dtype=np.int64)
    dist = point_segment_distance(samples.reshape(-1, 2), segs).reshape(m, k, n)
    ok = np.asarray(valid, dtype=bool)[..., None]
    with np.errstate(invalid="ignore"):
        hit = ok & (dist < thresh)
    return hit.sum(axis=1).astype(np.int64)
