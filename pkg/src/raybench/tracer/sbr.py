"""Shooting and bouncing rays: launch, capture, and correction."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..em import CarrierConfig
from ..geometry import Scene, visible_batch
from . import _kernel
from .directions import launch_directions
from .image import reflection_path, solve_and_check
from .paths import PropagationPath, TraceParams, TraceStats

BLOCK_RAYS = 1 << 15


@dataclass
class ReceiverGrid:
    """Uniform xy bucketing of receivers for the reception-sphere test."""

    points: np.ndarray
    x0: float
    y0: float
    cell: float
    nx: int
    ny: int
    start: np.ndarray
    items: np.ndarray

    @classmethod
    def build(cls, points) -> "ReceiverGrid":
        pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            return cls(pts, 0.0, 0.0, 1.0, 1, 1, np.zeros(2, np.int64), np.zeros(0, np.int64))
        lo = pts[:, :2].min(axis=0)
        hi = pts[:, :2].max(axis=0)
        area = max(float(np.prod(hi - lo)), 1.0)
        cell = max(math.sqrt(area / len(pts)), 1.0)
        nx = int((hi[0] - lo[0]) // cell) + 1
        ny = int((hi[1] - lo[1]) // cell) + 1
        ci = np.minimum(((pts[:, 0] - lo[0]) // cell).astype(np.int64), nx - 1)
        cj = np.minimum(((pts[:, 1] - lo[1]) // cell).astype(np.int64), ny - 1)
        flat = ci * ny + cj
        items = np.argsort(flat, kind="stable").astype(np.int64)
        start = np.searchsorted(flat[items], np.arange(nx * ny + 1)).astype(np.int64)
        return cls(pts, float(lo[0]), float(lo[1]), cell, nx, ny, start, items)


@dataclass
class LaunchResult:
    n_rays: int
    n_segments: int
    cap_ray: np.ndarray
    cap_rx: np.ndarray
    cap_depth: np.ndarray
    cap_seq: np.ndarray
    hit_ray: np.ndarray
    hit_depth: np.ndarray
    hit_tri: np.ndarray
    hit_point: np.ndarray
    hit_kin: np.ndarray
    hit_len: np.ndarray
    hit_field: np.ndarray
    hit_prev: np.ndarray


def _triangle_eta(scene: Scene, carrier: CarrierConfig) -> np.ndarray:
    table = np.array([scene.eta(m, carrier) for m in range(len(scene.materials))], dtype=np.complex128)
    return table[scene.material_ids]


def _run_block(scene, grid, origins, dirs, L0, budget, alpha_dt, tri_eta, record_hits, max_k):
    n = len(dirs)
    cap = 2 * n + 1024
    n_hit_cap = n * (int(budget.max()) + 1) if (record_hits and n) else 0
    ix = scene.index
    while True:
        cap_ray = np.empty(cap, np.int64)
        cap_rx = np.empty(cap, np.int64)
        cap_depth = np.empty(cap, np.int64)
        cap_seq = np.empty((cap, max_k), np.int64)
        hit_ray = np.empty(n_hit_cap, np.int64)
        hit_depth = np.empty(n_hit_cap, np.int64)
        hit_tri = np.empty(n_hit_cap, np.int64)
        hit_point = np.empty((n_hit_cap, 3))
        hit_kin = np.empty((n_hit_cap, 3))
        hit_len = np.empty(n_hit_cap)
        hit_field = np.empty((n_hit_cap, 3), np.complex128)
        hit_prev = np.empty(n_hit_cap, np.int64)
        n_cap, n_hit, n_seg = _kernel.launch(
            origins, dirs, L0, budget, alpha_dt,
            grid.points, grid.x0, grid.y0, grid.cell, grid.nx, grid.ny, grid.start, grid.items,
            scene.bounds[0], scene.bounds[1],
            ix.lo, ix.hi, ix.left, ix.right, ix.start, ix.count, ix.order, scene.v0, scene.e1, scene.e2,
            scene.normals, scene.triangle_surface, tri_eta, record_hits,
            cap_ray, cap_rx, cap_depth, cap_seq,
            hit_ray, hit_depth, hit_tri, hit_point, hit_kin, hit_len, hit_field, hit_prev,
        )
        if n_cap <= cap:
            break
        cap = n_cap
    return LaunchResult(
        n, n_seg, cap_ray[:n_cap], cap_rx[:n_cap], cap_depth[:n_cap], cap_seq[:n_cap],
        hit_ray[:n_hit], hit_depth[:n_hit], hit_tri[:n_hit], hit_point[:n_hit], hit_kin[:n_hit],
        hit_len[:n_hit], hit_field[:n_hit], hit_prev[:n_hit],
    )


def run_launch(scene: Scene, origins, dirs, L0, budget, alpha_dt: float, rx_points, carrier: CarrierConfig,
               record_hits: bool = False, workers: int = 1, grid: Optional[ReceiverGrid] = None) -> LaunchResult:
    """Launch rays in fixed-size blocks, optionally on several threads.

    Blocks are merged in ray order, so the result does not depend on
    ``workers``.
    """
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    n = len(dirs)
    origins = np.ascontiguousarray(np.broadcast_to(np.asarray(origins, float), (n, 3)))
    L0 = np.ascontiguousarray(np.broadcast_to(np.asarray(L0, float), (n,)))
    budget = np.ascontiguousarray(np.broadcast_to(np.asarray(budget, np.int64), (n,)))
    if grid is None:
        grid = ReceiverGrid.build(rx_points)
    tri_eta = _triangle_eta(scene, carrier)
    max_k = max(int(budget.max()) if n else 0, 1)
    blocks = [(b, min(b + BLOCK_RAYS, n)) for b in range(0, n, BLOCK_RAYS)]

    def job(span):
        b, e = span
        return _run_block(scene, grid, origins[b:e], dirs[b:e], L0[b:e], budget[b:e], alpha_dt,
                          tri_eta, record_hits, max_k)

    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, blocks))
    else:
        parts = [job(s) for s in blocks]
    if not parts:
        parts = [_run_block(scene, grid, origins, dirs, L0, budget, alpha_dt, tri_eta, record_hits, max_k)]
    ray_off = 0
    hit_off = 0
    for (b, _), p in zip(blocks, parts):
        p.cap_ray += b
        p.hit_ray += b
        p.hit_prev[p.hit_prev >= 0] += hit_off
        hit_off += len(p.hit_ray)
    cat = np.concatenate
    return LaunchResult(
        n, sum(p.n_segments for p in parts),
        cat([p.cap_ray for p in parts]), cat([p.cap_rx for p in parts]), cat([p.cap_depth for p in parts]),
        cat([p.cap_seq for p in parts]),
        cat([p.hit_ray for p in parts]), cat([p.hit_depth for p in parts]), cat([p.hit_tri for p in parts]),
        cat([p.hit_point for p in parts]), cat([p.hit_kin for p in parts]), cat([p.hit_len for p in parts]),
        cat([p.hit_field for p in parts]), cat([p.hit_prev for p in parts]),
    )


def correct_captures(scene: Scene, src, rx_points, cap_rx, cap_depth, cap_seq, owners=None):
    """Deduplicate captured (receiver, sequence) candidates and re-solve them exactly.

    ``src`` is a single point or one point per capture (``owners`` then gives
    the source id that makes two captures distinct). Returns a list of
    ``(owner, rx_index, sequence, points)`` for the valid ones, in sorted
    candidate order.
    """
    if len(cap_rx) == 0:
        return []
    src = np.asarray(src, float)
    per_row_src = src.ndim == 2
    owners = np.zeros(len(cap_rx), np.int64) if owners is None else np.asarray(owners, np.int64)
    keys = np.column_stack([owners, cap_rx, cap_depth, cap_seq])
    uniq, first = np.unique(keys, axis=0, return_index=True)
    out = []
    for k in np.unique(uniq[:, 2]):
        rows = uniq[uniq[:, 2] == k]
        firsts = first[uniq[:, 2] == k]
        seqs = rows[:, 3 : 3 + k]
        if k > 1:
            good = (seqs[:, 1:] != seqs[:, :-1]).all(axis=1)
            rows, firsts, seqs = rows[good], firsts[good], seqs[good]
        if not len(rows):
            continue
        s = src[firsts] if per_row_src else src
        dst = np.asarray(rx_points, float)[rows[:, 1]]
        pts, ok = solve_and_check(scene, seqs, s, dst)
        for i in np.flatnonzero(ok):
            out.append((int(rows[i, 0]), int(rows[i, 1]), seqs[i], pts[i]))
    return out


def los_paths(scene: Scene, tx, rx_points) -> dict[int, list[PropagationPath]]:
    tx = np.asarray(tx, float)
    rx_points = np.asarray(rx_points, float).reshape(-1, 3)
    out = {q: [] for q in range(len(rx_points))}
    a = np.broadcast_to(tx, rx_points.shape)
    distinct = np.linalg.norm(rx_points - tx, axis=1) > 0
    vis = np.zeros(len(rx_points), dtype=bool)
    if distinct.any():
        vis[distinct] = visible_batch(scene, a[distinct], rx_points[distinct])
    for q in np.flatnonzero(vis):
        out[int(q)].append(PropagationPath(tx.copy(), rx_points[q].copy()))
    return out


def launch_sbr(scene: Scene, tx, rx_set, params: TraceParams, carrier: Optional[CarrierConfig] = None,
               stats: Optional[TraceStats] = None, workers: int = 1, record_hits: bool = False,
               _return_launch: bool = False):
    """LoS plus corrected reflection paths for every receiver from one shared launch."""
    params.validate()
    if params.method != "sbr":
        raise ValueError("launch_sbr needs method='sbr'")
    carrier = carrier or CarrierConfig()
    tx = np.asarray(tx, float)
    rx_points = np.asarray(rx_set, float).reshape(-1, 3)
    dirs, spacing = launch_directions(params)
    if len(dirs) == 0:
        raise ValueError("empty direction set")
    K = params.reflection_budget
    res = run_launch(scene, tx, dirs, 0.0, K, params.reception_alpha * spacing, rx_points, carrier,
                     record_hits=record_hits, workers=workers)
    paths = los_paths(scene, tx, rx_points)
    found = correct_captures(scene, tx, rx_points, res.cap_rx, res.cap_depth, res.cap_seq)
    for _, q, seq, pts in found:
        paths[q].append(reflection_path(tx, rx_points[q], seq, pts))
    if stats is not None:
        stats.rays += res.n_rays
        stats.segments += res.n_segments
        stats.captures += len(res.cap_rx)
        stats.corrected += len(found)
        stats.extra["spacing"] = spacing
    if _return_launch:
        return paths, res
    return paths
