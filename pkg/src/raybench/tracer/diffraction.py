"""Single-edge diffraction paths, optionally combined with reflections."""
from __future__ import annotations

import itertools
import math
from typing import Optional

import numpy as np

from ..em import KELLER_TOL
from ..geometry import Scene, visible_batch
from .image import MIN_SEGMENT, _side_bits, mirror, solve_and_check, surface_tables
from .paths import Interaction, PropagationPath, TraceStats

INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0
FERMAT_TOL = 1e-9
END_EPS = 1e-9


class EdgeTables:
    def __init__(self, scene: Scene, edge_ids=None):
        ids = np.arange(len(scene.edges)) if edge_ids is None else np.asarray(list(edge_ids), dtype=np.int64)
        es = [scene.edges[i] for i in ids]
        self.ids = ids
        self.p0 = np.array([e.p0 for e in es]).reshape(-1, 3)
        self.p1 = np.array([e.p1 for e in es]).reshape(-1, 3)
        self.dir = np.array([e.direction for e in es]).reshape(-1, 3)
        self.normal_a = np.array([e.normal_a for e in es]).reshape(-1, 3)
        self.tangent_a = np.array([e.tangent_a for e in es]).reshape(-1, 3)
        self.n = np.array([e.n for e in es])

    def __len__(self):
        return len(self.ids)


def _length(t, A, B, p0, seg):
    P = p0 + t[:, None] * seg
    return np.linalg.norm(P - A, axis=1) + np.linalg.norm(P - B, axis=1)


def fermat_points(A, B, p0, p1, tol: float = FERMAT_TOL) -> np.ndarray:
    """Edge parameter ``t`` in [0, 1] minimizing ``|A - P(t)| + |P(t) - B|``.

    Golden-section search down to an interval of ``tol``, then one Newton
    step (kept only if it stays inside the final bracket).
    """
    A = np.asarray(A, float).reshape(-1, 3)
    B = np.asarray(B, float).reshape(-1, 3)
    p0 = np.asarray(p0, float).reshape(-1, 3)
    seg = np.asarray(p1, float).reshape(-1, 3) - p0
    m = max(len(A), len(B), len(p0))
    A, B, p0, seg = (np.broadcast_to(x, (m, 3)) for x in (A, B, p0, seg))
    a = np.zeros(m)
    b = np.ones(m)
    c = b - INV_PHI * (b - a)
    d = a + INV_PHI * (b - a)
    fc = _length(c, A, B, p0, seg)
    fd = _length(d, A, B, p0, seg)
    n_iter = int(math.ceil(math.log(tol) / math.log(INV_PHI)))
    for _ in range(n_iter):
        left = fc <= fd
        a, b = np.where(left, a, c), np.where(left, d, b)
        new = np.where(left, b - INV_PHI * (b - a), a + INV_PHI * (b - a))
        fn = _length(new, A, B, p0, seg)
        c, d, fc, fd = (
            np.where(left, new, d), np.where(left, c, new),
            np.where(left, fn, fd), np.where(left, fc, fn),
        )
    t = 0.5 * (a + b)
    # Newton polish on the derivative of the path length
    P = p0 + t[:, None] * seg
    ra = P - A
    rb = P - B
    la = np.linalg.norm(ra, axis=1)
    lb = np.linalg.norm(rb, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.einsum("ij,ij->i", seg, ra / la[:, None] + rb / lb[:, None])
        ss = np.einsum("ij,ij->i", seg, seg)
        ca = np.einsum("ij,ij->i", seg, ra) / la
        cb = np.einsum("ij,ij->i", seg, rb) / lb
        h = (ss - ca * ca) / la + (ss - cb * cb) / lb
        tn = t - g / h
    good = np.isfinite(tn) & (tn >= a) & (tn <= b)
    return np.where(good, tn, t)


def _phi(v, e, na, ta):
    v = v - np.einsum("ij,ij->i", v, e)[:, None] * e
    ang = np.arctan2(np.einsum("ij,ij->i", v, na), np.einsum("ij,ij->i", v, ta))
    return np.where(ang < 0, ang + 2 * math.pi, ang)


def edge_geometry_ok(D, A, B, tab: EdgeTables, rows) -> np.ndarray:
    """Keller cone and exterior-wedge checks for diffraction at ``D`` between ``A`` and ``B``."""
    e = tab.dir[rows]
    ki = D - A
    ko = B - D
    li = np.linalg.norm(ki, axis=1)
    lo = np.linalg.norm(ko, axis=1)
    ok = (li > MIN_SEGMENT) & (lo > MIN_SEGMENT)
    with np.errstate(divide="ignore", invalid="ignore"):
        ki = ki / li[:, None]
        ko = ko / lo[:, None]
        cbi = np.einsum("ij,ij->i", ki, e)
        cbo = np.einsum("ij,ij->i", ko, e)
    ok &= np.abs(cbi - cbo) <= KELLER_TOL
    ok &= np.abs(cbi) < 1.0 - 1e-12
    na, ta, n = tab.normal_a[rows], tab.tangent_a[rows], tab.n[rows]
    lim = n * math.pi + 1e-9
    ok &= _phi(-ki, e, na, ta) <= lim
    ok &= _phi(ko, e, na, ta) <= lim
    return ok & np.isfinite(cbi) & np.isfinite(cbo)


def _images(tab_s, start, seq):
    """Image of ``start`` (M, 3) through the surfaces in ``seq`` (M, k), applied left to right."""
    img = start
    for j in range(seq.shape[1]):
        s = seq[:, j]
        img = mirror(img, tab_s.normals[s], tab_s.offsets[s])
    return img


def _sequences(n: int, k: int) -> np.ndarray:
    if k == 0:
        return np.zeros((1, 0), dtype=np.int64)
    out = [s for s in itertools.product(range(n), repeat=k) if all(a != b for a, b in zip(s, s[1:]))]
    return np.array(out, dtype=np.int64).reshape(-1, k)


def _solve_combo(scene, tab_s, etab, tx, rx, seq1, seq2, rows):
    """Diffraction paths with reflection legs ``seq1`` (tx side) and ``seq2`` (rx side).

    ``seq1``/``seq2``/``rows`` are aligned (M, a), (M, b), (M,) candidate arrays.
    """
    m = len(rows)
    if m == 0:
        return []
    A = _images(tab_s, np.broadcast_to(tx, (m, 3)), seq1)
    B = _images(tab_s, np.broadcast_to(rx, (m, 3)), seq2[:, ::-1])
    t = fermat_points(A, B, etab.p0[rows], etab.p1[rows])
    ok = (t > END_EPS) & (t < 1.0 - END_EPS)
    D = etab.p0[rows] + t[:, None] * (etab.p1[rows] - etab.p0[rows])
    ok &= edge_geometry_ok(D, A, B, etab, rows)
    idx = np.flatnonzero(ok)
    if not len(idx):
        return []
    a, b = seq1.shape[1], seq2.shape[1]
    pts1 = np.zeros((len(idx), a, 3))
    pts2 = np.zeros((len(idx), b, 3))
    good = np.ones(len(idx), dtype=bool)
    if a:
        pts1, ok1 = solve_and_check(scene, seq1[idx], tx, D[idx])
        good &= ok1
    else:
        good &= _visible_rows(scene, np.broadcast_to(tx, (len(idx), 3)), D[idx])
    if b:
        pts2, ok2 = solve_and_check(scene, seq2[idx], D[idx], rx)
        good &= ok2
    else:
        good &= _visible_rows(scene, D[idx], np.broadcast_to(rx, (len(idx), 3)))
    out = []
    for j in np.flatnonzero(good):
        i = idx[j]
        inter = [Interaction("R", pts1[j, q].copy(), int(seq1[i, q])) for q in range(a)]
        inter.append(Interaction("D", D[i].copy(), int(etab.ids[rows[i]])))
        inter += [Interaction("R", pts2[j, q].copy(), int(seq2[i, q])) for q in range(b)]
        out.append(PropagationPath(np.array(tx, float), np.array(rx, float), tuple(inter)))
    return out


def _visible_rows(scene, a, b):
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b)
    ok = np.linalg.norm(b - a, axis=1) > MIN_SEGMENT
    if ok.any():
        ok[ok] = visible_batch(scene, a[ok], b[ok])
    return ok


def diffraction_paths(scene: Scene, tx, rx, edges=None, combine_with_reflections: bool = False,
                      max_reflections: int = 1, stats: Optional[TraceStats] = None,
                      etab: Optional[EdgeTables] = None) -> list[PropagationPath]:
    """Paths with exactly one edge diffraction.

    The diffraction point is the length-stationary point on each edge. With
    ``combine_with_reflections`` the legs before and after the edge may each
    hold reflections, ``max_reflections`` in total.
    """
    tx = np.asarray(tx, float)
    rx = np.asarray(rx, float)
    if etab is None:
        etab = EdgeTables(scene, edges)
    ne = len(etab)
    if ne == 0:
        return []
    tab_s = surface_tables(scene)
    ns = len(tab_s.offsets)
    rows = np.arange(ne)
    empty = np.zeros((ne, 0), dtype=np.int64)
    paths = _solve_combo(scene, tab_s, etab, tx, rx, empty, empty, rows)
    if stats is not None:
        stats.candidates += ne
    if not combine_with_reflections or max_reflections < 1:
        return paths
    tx_bits = _side_bits(np.broadcast_to(tx, (ns, 3)), tab_s.normals, tab_s.offsets)
    rx_bits = _side_bits(np.broadcast_to(rx, (ns, 3)), tab_s.normals, tab_s.offsets)
    # side of each surface plane the edge endpoints occupy
    d0 = etab.p0 @ tab_s.normals.T - tab_s.offsets          # (E, N)
    d1 = etab.p1 @ tab_s.normals.T - tab_s.offsets
    edge_bits = (((d0 > 1e-9) | (d1 > 1e-9)) * 1 + ((d0 < -1e-9) | (d1 < -1e-9)) * 2).astype(np.uint8)
    for total in range(1, max_reflections + 1):
        for a in range(total + 1):
            b = total - a
            s1 = _sequences(ns, a)
            s2 = _sequences(ns, b)
            # cheap side filters: the first/last surface must face tx/rx and reach the edge
            if a:
                s1 = s1[tx_bits[s1[:, 0]] != 0]
            if b:
                s2 = s2[rx_bits[s2[:, -1]] != 0]
            if not len(s1) or not len(s2):
                continue
            i1, i2, ie = np.meshgrid(np.arange(len(s1)), np.arange(len(s2)), rows, indexing="ij")
            i1, i2, ie = i1.ravel(), i2.ravel(), ie.ravel()
            keep = np.ones(len(ie), dtype=bool)
            if a:
                keep &= (edge_bits[ie, s1[i1, -1]] & (tx_bits[s1[i1, -1]] if a == 1 else 3)) != 0
            if b:
                keep &= (edge_bits[ie, s2[i2, 0]] & (rx_bits[s2[i2, 0]] if b == 1 else 3)) != 0
            i1, i2, ie = i1[keep], i2[keep], ie[keep]
            if stats is not None:
                stats.candidates += len(ie)
            # bounded memory per batch
            step = 200_000
            for s in range(0, len(ie), step):
                sl = slice(s, s + step)
                paths += _solve_combo(scene, tab_s, etab, tx, rx, s1[i1[sl]], s2[i2[sl]], ie[sl])
    return paths
