"""Numba kernel for shooting and bouncing rays with reception spheres."""
from __future__ import annotations

import math

import numba
import numpy as np

from .._bvh import nearest
from ..em import reflect_field, vertical_pol
from ..geometry import EPS_HIT

DIRECT_TEST_MAX = 8


@numba.njit(cache=True, nogil=True)
def _exit_distance(o, d, bmin, bmax):
    tf = np.inf
    for j in range(3):
        if d[j] > 0.0:
            tf = min(tf, (bmax[j] - o[j]) / d[j])
        elif d[j] < 0.0:
            tf = min(tf, (bmin[j] - o[j]) / d[j])
    return max(tf, 0.0)


@numba.njit(cache=True, nogil=True, inline="always")
def _try_capture(q, o, d, seg_len, L_start, alpha_dt, rx, stamp, tag):
    if stamp[q] == tag:
        return False
    wx = rx[q, 0] - o[0]
    wy = rx[q, 1] - o[1]
    wz = rx[q, 2] - o[2]
    t = wx * d[0] + wy * d[1] + wz * d[2]
    if t < 0.0 or t > seg_len:
        return False
    dist2 = wx * wx + wy * wy + wz * wz - t * t
    r = alpha_dt * (L_start + t)
    if dist2 <= r * r:
        stamp[q] = tag
        return True
    return False


@numba.njit(cache=True, nogil=True)
def launch(origins, dirs, L0, budget, alpha_dt,
           rx, gx0, gy0, cell, gnx, gny, cell_start, cell_items,
           bmin, bmax,
           lo, hi, left, right, start, count, order, v0, e1, e2,
           normals, tri_surface, tri_eta, record_hits,
           cap_ray, cap_rx, cap_depth, cap_seq,
           hit_ray, hit_depth, hit_tri, hit_point, hit_kin, hit_len, hit_field, hit_prev):
    """Trace every ray up to its reflection budget.

    Receivers are tested on every segment after at least one reflection.
    Returns ``(n_captures, n_hits, n_segments)``; counts above the buffer
    capacity mean the caller must retry with larger buffers.
    """
    n_rays = dirs.shape[0]
    n_rx = rx.shape[0]
    max_k = cap_seq.shape[1]
    cap_capacity = cap_ray.shape[0]
    hit_capacity = hit_ray.shape[0]
    stamp = np.full(n_rx, -1, dtype=np.int64)
    seq = np.empty(max(max_k, 1), dtype=np.int64)
    n_cap = 0
    n_hit = 0
    n_seg = 0
    o = np.empty(3)
    d = np.empty(3)
    for r in range(n_rays):
        for j in range(3):
            o[j] = origins[r, j]
            d[j] = dirs[r, j]
        L = L0[r]
        E = vertical_pol(d).astype(np.complex128)
        prev = -1
        nb = budget[r]
        for b in range(nb + 1):
            tmax = _exit_distance(o, d, bmin, bmax)
            t, tri = nearest(o, d, EPS_HIT, tmax, lo, hi, left, right, start, count, order, v0, e1, e2)
            n_seg += 1
            seg_len = t if tri >= 0 else tmax
            if b >= 1 and n_rx > 0:
                tag = r * (nb + 1) + b
                if n_rx <= DIRECT_TEST_MAX:
                    for q in range(n_rx):
                        if _try_capture(q, o, d, seg_len, L, alpha_dt, rx, stamp, tag):
                            if n_cap < cap_capacity:
                                cap_ray[n_cap] = r
                                cap_rx[n_cap] = q
                                cap_depth[n_cap] = b
                                for j in range(max_k):
                                    cap_seq[n_cap, j] = seq[j] if j < b else -1
                            n_cap += 1
                else:
                    n_sub = min(int(seg_len / cell) + 1, 100000)
                    step = seg_len / n_sub
                    for s in range(n_sub):
                        ta = s * step
                        tb = ta + step
                        rad = alpha_dt * (L + tb)
                        xa = o[0] + ta * d[0]
                        xb = o[0] + tb * d[0]
                        ya = o[1] + ta * d[1]
                        yb = o[1] + tb * d[1]
                        i0 = int(math.floor((min(xa, xb) - rad - gx0) / cell))
                        i1 = int(math.floor((max(xa, xb) + rad - gx0) / cell))
                        j0 = int(math.floor((min(ya, yb) - rad - gy0) / cell))
                        j1 = int(math.floor((max(ya, yb) + rad - gy0) / cell))
                        i0 = max(i0, 0)
                        j0 = max(j0, 0)
                        i1 = min(i1, gnx - 1)
                        j1 = min(j1, gny - 1)
                        for ci in range(i0, i1 + 1):
                            for cj in range(j0, j1 + 1):
                                c = ci * gny + cj
                                for k in range(cell_start[c], cell_start[c + 1]):
                                    q = cell_items[k]
                                    if _try_capture(q, o, d, seg_len, L, alpha_dt, rx, stamp, tag):
                                        if n_cap < cap_capacity:
                                            cap_ray[n_cap] = r
                                            cap_rx[n_cap] = q
                                            cap_depth[n_cap] = b
                                            for j in range(max_k):
                                                cap_seq[n_cap, j] = seq[j] if j < b else -1
                                        n_cap += 1
            if tri < 0:
                break
            nx = normals[tri, 0]
            ny = normals[tri, 1]
            nz = normals[tri, 2]
            if record_hits:
                if n_hit < hit_capacity:
                    hit_ray[n_hit] = r
                    hit_depth[n_hit] = b
                    hit_tri[n_hit] = tri
                    for j in range(3):
                        hit_point[n_hit, j] = o[j] + t * d[j]
                        hit_kin[n_hit, j] = d[j]
                        hit_field[n_hit, j] = E[j]
                    hit_len[n_hit] = L + t
                    hit_prev[n_hit] = prev
                prev = n_hit
                n_hit += 1
            if b == nb:
                break
            for j in range(3):
                o[j] = o[j] + t * d[j]
            dn = d[0] * nx + d[1] * ny + d[2] * nz
            d_out = np.empty(3)
            d_out[0] = d[0] - 2.0 * dn * nx
            d_out[1] = d[1] - 2.0 * dn * ny
            d_out[2] = d[2] - 2.0 * dn * nz
            nrm = math.sqrt(d_out[0] ** 2 + d_out[1] ** 2 + d_out[2] ** 2)
            for j in range(3):
                d_out[j] /= nrm
            if record_hits:
                E = reflect_field(E, d, d_out, normals[tri], tri_eta[tri])
            for j in range(3):
                d[j] = d_out[j]
            if b < seq.shape[0]:
                seq[b] = tri_surface[tri]
            L += t
    return n_cap, n_hit, n_seg
