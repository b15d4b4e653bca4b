"""Exact image-method tracing and the shared path-correction solver."""
from __future__ import annotations

import weakref
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..geometry import Scene, visible_batch
from .paths import IMAGE_MAX_REFLECTIONS, Interaction, PropagationPath, TraceStats

PLANE_EPS = 1e-9
BARY_TOL = 1e-9
MIN_SEGMENT = 1e-9

_TABLES: "weakref.WeakKeyDictionary[Scene, SurfaceTables]" = weakref.WeakKeyDictionary()


class UnsupportedDepthError(ValueError):
    pass


@dataclass(frozen=True)
class SurfaceTables:
    normals: np.ndarray      # (N, 3)
    offsets: np.ndarray      # (N,)
    tri_pad: np.ndarray      # (N, T) triangle ids, -1 padded
    side: np.ndarray         # (N, N) uint8: bit 1/2 = surface a has vertices above/below plane b


def surface_tables(scene: Scene) -> SurfaceTables:
    tab = _TABLES.get(scene)
    if tab is not None:
        return tab
    surfs = scene.surfaces
    n = len(surfs)
    normals = np.array([s.normal for s in surfs]).reshape(n, 3)
    offsets = np.array([s.offset for s in surfs])
    width = max(len(s.triangles) for s in surfs)
    tri_pad = np.full((n, width), -1, dtype=np.int64)
    for s in surfs:
        tri_pad[s.sid, : len(s.triangles)] = s.triangles
    side = np.zeros((n, n), dtype=np.uint8)
    for s in surfs:
        ids = np.array(s.triangles)
        verts = np.concatenate([scene.v0[ids], scene.v1[ids], scene.v2[ids]])
        dist = verts @ normals.T - offsets              # (V, N)
        side[s.sid] = (dist > PLANE_EPS).any(axis=0) * 1 + (dist < -PLANE_EPS).any(axis=0) * 2
    tab = SurfaceTables(normals, offsets, tri_pad, side)
    _TABLES[scene] = tab
    return tab


def mirror(points: np.ndarray, normals: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    dist = np.einsum("ij,ij->i", points, normals) - offsets
    return points - 2.0 * dist[:, None] * normals


def _side_bits(points: np.ndarray, normals: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    dist = np.einsum("ij,ij->i", points, normals) - offsets
    return (dist > PLANE_EPS) * 1 + (dist < -PLANE_EPS) * 2


def in_surface(scene: Scene, tab: SurfaceTables, pts: np.ndarray, sids: np.ndarray) -> np.ndarray:
    """Whether each point lies inside the triangles of its surface (barycentric test)."""
    inside = np.zeros(len(pts), dtype=bool)
    tris = tab.tri_pad[sids]
    for col in range(tris.shape[1]):
        t = tris[:, col]
        live = (t >= 0) & ~inside
        if not live.any():
            break
        tt = t[live]
        e1, e2 = scene.e1[tt], scene.e2[tt]
        w = pts[live] - scene.v0[tt]
        d00 = np.einsum("ij,ij->i", e1, e1)
        d01 = np.einsum("ij,ij->i", e1, e2)
        d11 = np.einsum("ij,ij->i", e2, e2)
        d20 = np.einsum("ij,ij->i", w, e1)
        d21 = np.einsum("ij,ij->i", w, e2)
        den = d00 * d11 - d01 * d01
        u = (d11 * d20 - d01 * d21) / den
        v = (d00 * d21 - d01 * d20) / den
        ok = (u >= -BARY_TOL) & (v >= -BARY_TOL) & (u + v <= 1.0 + BARY_TOL)
        inside[np.flatnonzero(live)[ok]] = True
    return inside


def solve_sequences(scene: Scene, seqs: np.ndarray, src: np.ndarray, dst: np.ndarray):
    """Reflection points for surface sequences by successive mirroring.

    ``seqs`` is (M, k); ``src``/``dst`` are (3,) or (M, 3). Returns ``(pts, ok)``
    with ``pts`` of shape (M, k, 3); ``ok`` marks sequences whose points all fall
    inside their surfaces. Visibility is not checked here.
    """
    tab = surface_tables(scene)
    seqs = np.asarray(seqs, dtype=np.int64)
    m, k = seqs.shape
    src = np.broadcast_to(np.asarray(src, float), (m, 3))
    dst = np.broadcast_to(np.asarray(dst, float), (m, 3))
    images = [np.array(src)]
    for j in range(k):
        s = seqs[:, j]
        images.append(mirror(images[-1], tab.normals[s], tab.offsets[s]))
    pts = np.empty((m, k, 3))
    ok = np.ones(m, dtype=bool)
    target = np.array(dst)
    with np.errstate(divide="ignore", invalid="ignore"):
        for j in range(k - 1, -1, -1):
            s = seqs[:, j]
            n = tab.normals[s]
            img = images[j + 1]
            seg = target - img
            den = np.einsum("ij,ij->i", n, seg)
            t = (tab.offsets[s] - np.einsum("ij,ij->i", n, img)) / den
            ok &= np.isfinite(t) & (t > 0.0) & (t < 1.0)
            p = img + t[:, None] * seg
            p[~ok] = 0.0
            pts[:, j] = p
            target = p
    if ok.any():
        idx = np.flatnonzero(ok)
        for j in range(k):
            good = in_surface(scene, tab, pts[idx, j], seqs[idx, j])
            idx = idx[good]
        ok[:] = False
        ok[idx] = True
    return pts, ok


def chain_visible(scene: Scene, src, pts: np.ndarray, dst) -> np.ndarray:
    """Every segment of ``src -> pts[i, 0] -> ... -> dst`` unobstructed and non-degenerate."""
    m, k = pts.shape[:2]
    if m == 0:
        return np.zeros(0, dtype=bool)
    src = np.broadcast_to(np.asarray(src, float), (m, 3))
    dst = np.broadcast_to(np.asarray(dst, float), (m, 3))
    chain = np.concatenate([src[:, None], pts, dst[:, None]], axis=1)   # (m, k+2, 3)
    a = chain[:, :-1].reshape(-1, 3)
    b = chain[:, 1:].reshape(-1, 3)
    long_enough = (np.linalg.norm(b - a, axis=1) > MIN_SEGMENT).reshape(m, k + 1).all(axis=1)
    vis = visible_batch(scene, a, b).reshape(m, k + 1).all(axis=1)
    return long_enough & vis


def solve_and_check(scene: Scene, seqs, src, dst):
    pts, ok = solve_sequences(scene, seqs, src, dst)
    if ok.any():
        idx = np.flatnonzero(ok)
        s = np.broadcast_to(np.asarray(src, float), (len(ok), 3))[idx]
        d = np.broadcast_to(np.asarray(dst, float), (len(ok), 3))[idx]
        ok[idx] = chain_visible(scene, s, pts[idx], d)
    return pts, ok


def reflection_path(tx, rx, seq, pts) -> PropagationPath:
    inter = tuple(Interaction("R", np.array(p), int(s)) for s, p in zip(seq, pts))
    return PropagationPath(np.array(tx, float), np.array(rx, float), inter)


def _as_surface_sequence(signature) -> list[int]:
    seq = []
    for item in signature:
        if isinstance(item, tuple):
            kind, ref = item
            if kind != "R":
                raise ValueError("correct_path only re-solves reflection sequences")
            seq.append(int(ref))
        else:
            seq.append(int(item))
    return seq


def correct_path(scene: Scene, signature, tx, rx) -> Optional[PropagationPath]:
    """Exact path for a given reflection sequence, or ``None`` when it is not realisable."""
    seq = _as_surface_sequence(signature)
    tx = np.asarray(tx, float)
    rx = np.asarray(rx, float)
    if not seq:
        ok = chain_visible(scene, tx, np.zeros((1, 0, 3)), rx)[0]
        return PropagationPath(tx, rx) if ok else None
    if any(a == b for a, b in zip(seq, seq[1:])):
        return None
    pts, ok = solve_and_check(scene, np.array([seq]), tx, rx)
    return reflection_path(tx, rx, seq, pts[0]) if ok[0] else None


def trace_image_method(scene: Scene, tx, rx, max_reflections: int, prune: bool = True,
                       stats: Optional[TraceStats] = None, include_los: bool = True) -> list[PropagationPath]:
    """All reflection paths with at most ``max_reflections`` bounces, plus LoS.

    Candidates are surface sequences without immediate repeats. With
    ``prune=False`` every one of the ``sum N (N-1)^(k-1)`` sequences is solved;
    pruning drops sequences whose plane sides make a reflection impossible.
    """
    if max_reflections > IMAGE_MAX_REFLECTIONS:
        raise UnsupportedDepthError(
            f"image method is limited to {IMAGE_MAX_REFLECTIONS} reflections "
            f"(asked for {max_reflections}); use the SBR method for deeper traces"
        )
    if max_reflections < 0:
        raise ValueError("max_reflections must be >= 0")
    tx = np.asarray(tx, float)
    rx = np.asarray(rx, float)
    tab = surface_tables(scene)
    n = len(tab.offsets)
    paths = []
    if include_los and chain_visible(scene, tx, np.zeros((1, 0, 3)), rx)[0]:
        paths.append(PropagationPath(tx, rx))
    if max_reflections == 0:
        return paths

    all_s = np.arange(n)
    tx_bits = _side_bits(np.broadcast_to(tx, (n, 3)), tab.normals, tab.offsets)
    rx_bits = _side_bits(np.broadcast_to(rx, (n, 3)), tab.normals, tab.offsets)

    seqs = all_s[:, None]
    arrive = tx_bits.astype(np.uint8)
    if prune:
        keep = arrive != 0
        seqs, arrive = seqs[keep], arrive[keep]
    for k in range(1, max_reflections + 1):
        if k > 1:
            last = seqs[:, -1]
            m = len(seqs)
            parent = np.repeat(np.arange(m), n)
            child = np.tile(all_s, m)
            keep = child != last[parent]
            if prune:
                # the next surface must reach into the half-space the ray leaves into,
                # and the previous surface must not lie in the next plane
                keep &= (tab.side[child, last[parent]] & arrive[parent]) != 0
                keep &= tab.side[last[parent], child] != 0
            parent, child = parent[keep], child[keep]
            arrive = tab.side[last[parent], child]
            seqs = np.concatenate([seqs[parent], child[:, None]], axis=1)
        if stats is not None:
            stats.candidates += len(seqs)
        if len(seqs) == 0:
            break
        test = np.ones(len(seqs), dtype=bool)
        if prune:
            test = (rx_bits[seqs[:, -1]] & arrive) != 0
        cand = seqs[test]
        if len(cand):
            pts, ok = solve_and_check(scene, cand, tx, rx)
            for i in np.flatnonzero(ok):
                paths.append(reflection_path(tx, rx, cand[i], pts[i]))
    paths.sort(key=lambda p: p.signature)
    return paths
