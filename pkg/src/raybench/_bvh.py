"""Bounding volume hierarchy over triangles and the numba ray queries on it.

The tree is built in numpy (median split on centroids) and flattened into
plain arrays so the traversal kernels can run under ``numba.njit(nogil=True)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

LEAF_SIZE = 4
BARY_EPS = 1e-12
DET_EPS = 1e-14
TIE_EPS = 1e-9


@dataclass(frozen=True)
class FlatBVH:
    lo: np.ndarray          # (M, 3) node box minimum
    hi: np.ndarray          # (M, 3) node box maximum
    left: np.ndarray        # (M,) child index, -1 for leaves
    right: np.ndarray
    start: np.ndarray       # (M,) first slot in ``order`` (leaves only)
    count: np.ndarray
    order: np.ndarray       # leaf slot -> triangle index

    @property
    def n_nodes(self) -> int:
        return len(self.left)


def build_bvh(v0: np.ndarray, v1: np.ndarray, v2: np.ndarray) -> FlatBVH:
    n = len(v0)
    tri_lo = np.minimum(np.minimum(v0, v1), v2)
    tri_hi = np.maximum(np.maximum(v0, v1), v2)
    cent = (v0 + v1 + v2) / 3.0

    lo, hi, left, right, start, count = [], [], [], [], [], []
    order = np.arange(n, dtype=np.int64)

    def new_node():
        lo.append(None)
        hi.append(None)
        left.append(-1)
        right.append(-1)
        start.append(0)
        count.append(0)
        return len(left) - 1

    root = new_node()
    # explicit stack: (node, begin, end) over ``order``
    stack = [(root, 0, n)]
    while stack:
        node, b, e = stack.pop()
        idx = order[b:e]
        if len(idx):
            lo[node] = tri_lo[idx].min(axis=0)
            hi[node] = tri_hi[idx].max(axis=0)
        else:
            lo[node] = np.full(3, np.inf)
            hi[node] = np.full(3, -np.inf)
        if e - b <= LEAF_SIZE:
            start[node] = b
            count[node] = e - b
            continue
        c = cent[idx]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        # stable sort keeps the build deterministic when centroids tie
        perm = np.argsort(c[:, axis], kind="stable")
        order[b:e] = idx[perm]
        mid = b + (e - b) // 2
        ln = new_node()
        rn = new_node()
        left[node] = ln
        right[node] = rn
        stack.append((rn, mid, e))
        stack.append((ln, b, mid))

    return FlatBVH(
        lo=np.array(lo, dtype=np.float64).reshape(-1, 3),
        hi=np.array(hi, dtype=np.float64).reshape(-1, 3),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        start=np.array(start, dtype=np.int64),
        count=np.array(count, dtype=np.int64),
        order=order,
    )


@numba.njit(cache=True, nogil=True, inline="always")
def _intersect_tri(ox, oy, oz, dx, dy, dz, v0, e1, e2, i):
    """Moller-Trumbore; returns t or -1.0."""
    px = dy * e2[i, 2] - dz * e2[i, 1]
    py = dz * e2[i, 0] - dx * e2[i, 2]
    pz = dx * e2[i, 1] - dy * e2[i, 0]
    det = e1[i, 0] * px + e1[i, 1] * py + e1[i, 2] * pz
    if -DET_EPS < det < DET_EPS:
        return -1.0
    inv = 1.0 / det
    tx = ox - v0[i, 0]
    ty = oy - v0[i, 1]
    tz = oz - v0[i, 2]
    u = (tx * px + ty * py + tz * pz) * inv
    if u < -BARY_EPS or u > 1.0 + BARY_EPS:
        return -1.0
    qx = ty * e1[i, 2] - tz * e1[i, 1]
    qy = tz * e1[i, 0] - tx * e1[i, 2]
    qz = tx * e1[i, 1] - ty * e1[i, 0]
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < -BARY_EPS or u + v > 1.0 + BARY_EPS:
        return -1.0
    return (e2[i, 0] * qx + e2[i, 1] * qy + e2[i, 2] * qz) * inv


@numba.njit(cache=True, nogil=True, inline="always")
def _slab(ox, oy, oz, idx, idy, idz, lo, hi, n, tmax):
    t0 = (lo[n, 0] - ox) * idx
    t1 = (hi[n, 0] - ox) * idx
    tmin = min(t0, t1)
    tfar = max(t0, t1)
    t0 = (lo[n, 1] - oy) * idy
    t1 = (hi[n, 1] - oy) * idy
    tmin = max(tmin, min(t0, t1))
    tfar = min(tfar, max(t0, t1))
    t0 = (lo[n, 2] - oz) * idz
    t1 = (hi[n, 2] - oz) * idz
    tmin = max(tmin, min(t0, t1))
    tfar = min(tfar, max(t0, t1))
    if tfar < max(tmin, 0.0) or tmin > tmax:
        return np.inf
    return tmin


@numba.njit(cache=True, nogil=True)
def nearest(o, d, tmin, tmax, lo, hi, left, right, start, count, order, v0, e1, e2):
    """Nearest hit in (tmin, tmax]; ties within TIE_EPS go to the lowest index."""
    ox, oy, oz = o[0], o[1], o[2]
    dx, dy, dz = d[0], d[1], d[2]
    idx = 1.0 / dx if dx != 0.0 else 1e300
    idy = 1.0 / dy if dy != 0.0 else 1e300
    idz = 1.0 / dz if dz != 0.0 else 1e300
    best_t = np.inf
    best_i = -1
    stack = np.empty(128, dtype=np.int64)
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        n = stack[sp]
        limit = min(tmax, best_t + TIE_EPS)
        if _slab(ox, oy, oz, idx, idy, idz, lo, hi, n, limit) == np.inf:
            continue
        if left[n] < 0:
            for k in range(start[n], start[n] + count[n]):
                i = order[k]
                t = _intersect_tri(ox, oy, oz, dx, dy, dz, v0, e1, e2, i)
                if t <= tmin or t > tmax:
                    continue
                if t < best_t - TIE_EPS or (abs(t - best_t) <= TIE_EPS and i < best_i):
                    best_t = t
                    best_i = i
        else:
            stack[sp] = left[n]
            sp += 1
            stack[sp] = right[n]
            sp += 1
    return best_t, best_i


@numba.njit(cache=True, nogil=True)
def nearest_brute(o, d, tmin, tmax, v0, e1, e2):
    best_t = np.inf
    best_i = -1
    for i in range(v0.shape[0]):
        t = _intersect_tri(o[0], o[1], o[2], d[0], d[1], d[2], v0, e1, e2, i)
        if t <= tmin or t > tmax:
            continue
        if t < best_t - TIE_EPS or (abs(t - best_t) <= TIE_EPS and i < best_i):
            best_t = t
            best_i = i
    return best_t, best_i


@numba.njit(cache=True, nogil=True)
def any_hit(o, d, tmin, tmax, lo, hi, left, right, start, count, order, v0, e1, e2):
    ox, oy, oz = o[0], o[1], o[2]
    dx, dy, dz = d[0], d[1], d[2]
    idx = 1.0 / dx if dx != 0.0 else 1e300
    idy = 1.0 / dy if dy != 0.0 else 1e300
    idz = 1.0 / dz if dz != 0.0 else 1e300
    stack = np.empty(128, dtype=np.int64)
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        n = stack[sp]
        if _slab(ox, oy, oz, idx, idy, idz, lo, hi, n, tmax) == np.inf:
            continue
        if left[n] < 0:
            for k in range(start[n], start[n] + count[n]):
                t = _intersect_tri(ox, oy, oz, dx, dy, dz, v0, e1, e2, order[k])
                if tmin < t < tmax:
                    return True
        else:
            stack[sp] = left[n]
            sp += 1
            stack[sp] = right[n]
            sp += 1
    return False


@numba.njit(cache=True, nogil=True)
def segments_visible(a, b, eps, lo, hi, left, right, start, count, order, v0, e1, e2):
    """Batch visibility for segment endpoints ``a[i] -> b[i]``."""
    n = a.shape[0]
    out = np.ones(n, dtype=np.bool_)
    d = np.empty(3)
    for i in range(n):
        L = 0.0
        for j in range(3):
            d[j] = b[i, j] - a[i, j]
            L += d[j] * d[j]
        L = np.sqrt(L)
        if L <= 2.0 * eps:
            continue
        for j in range(3):
            d[j] /= L
        if any_hit(a[i], d, eps, L - eps, lo, hi, left, right, start, count, order, v0, e1, e2):
            out[i] = False
    return out


@numba.njit(cache=True, nogil=True)
def count_distinct_hits(o, d, tmax, v0, e1, e2):
    """Number of distinct hit distances along a ray (crossing parity tests)."""
    ts = np.empty(v0.shape[0])
    m = 0
    for i in range(v0.shape[0]):
        t = _intersect_tri(o[0], o[1], o[2], d[0], d[1], d[2], v0, e1, e2, i)
        if 0.0 < t <= tmax:
            ts[m] = t
            m += 1
    if m == 0:
        return 0
    ts = np.sort(ts[:m])
    c = 1
    for k in range(1, m):
        if ts[k] - ts[k - 1] > 1e-9:
            c += 1
    return c
