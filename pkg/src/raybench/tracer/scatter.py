"""Diffuse scattering paths spawned at SBR surface hits."""
from __future__ import annotations

import math
from typing import Optional

import numpy as np

from ..em import CarrierConfig, SPEED_OF_LIGHT, PathAmplitude
from ..geometry import Scene, visible_batch
from .directions import effective_spacing, grid_directions
from .image import MIN_SEGMENT
from .paths import Interaction, PropagationPath, TraceParams, TraceStats
from .sbr import LaunchResult, ReceiverGrid, correct_captures, run_launch

PAIR_CHUNK = 1 << 20
SECONDARY_CHUNK = 1 << 20


def _remaining(params: TraceParams, depth: np.ndarray) -> np.ndarray:
    """Reflections still allowed after a scatter at a hit with ``depth`` prior reflections."""
    if params.depth_mode == "joint":
        return (params.max_depth or 0) - depth - 1
    return params.max_reflections - depth


def _prefix(res: LaunchResult, scene: Scene, h: int) -> list[Interaction]:
    chain = []
    p = res.hit_prev[h]
    while p >= 0:
        chain.append(p)
        p = res.hit_prev[p]
    return [
        Interaction("R", res.hit_point[i].copy(), int(scene.triangle_surface[res.hit_tri[i]]))
        for i in reversed(chain)
    ]


def _scatter_interaction(res, scene, h, params, solid_angle) -> Interaction:
    return Interaction("S", res.hit_point[h].copy(), int(scene.triangle_surface[res.hit_tri[h]]),
                       roughness=params.roughness, solid_angle=solid_angle)


def _oriented_normals(scene: Scene, res: LaunchResult, hits: np.ndarray) -> np.ndarray:
    """Hit normals flipped towards the side the ray came from."""
    n = scene.normals[res.hit_tri[hits]]
    flip = np.einsum("ij,ij->i", n, res.hit_kin[hits]) > 0
    return np.where(flip[:, None], -n, n)


class ScatterBundle:
    """Single-spawn scatter contributions for one receiver, stored as arrays."""

    def __init__(self, scene, tx, rx, res, hits, amplitudes, lengths, roughness, solid_angle):
        self.scene = scene
        self.tx = tx
        self.rx = rx
        self.res = res
        self.hits = hits
        self.amplitudes = amplitudes
        self.lengths = lengths
        self.roughness = roughness
        self.solid_angle = solid_angle

    def __len__(self):
        return len(self.hits)

    def materialize(self) -> list[PropagationPath]:
        out = []
        res, scene = self.res, self.scene
        for j, h in enumerate(self.hits):
            h = int(h)
            inter = _prefix(res, scene, h)
            inter.append(Interaction("S", res.hit_point[h].copy(), int(scene.triangle_surface[res.hit_tri[h]]),
                                     roughness=self.roughness, solid_angle=self.solid_angle))
            amp = PathAmplitude(complex(self.amplitudes[j]), float(self.lengths[j]) / SPEED_OF_LIGHT)
            out.append(PropagationPath(self.tx, self.rx, tuple(inter), amp))
        return out


def _empty_bundle(scene, tx, rx, res, params):
    return ScatterBundle(scene, tx, rx, res, np.zeros(0, np.int64), np.zeros(0, complex), np.zeros(0),
                         params.roughness, 0.0)


def single_spawn(scene: Scene, tx, rx_points, params: TraceParams, res: LaunchResult,
                 carrier: CarrierConfig, stats: Optional[TraceStats] = None) -> dict[int, ScatterBundle]:
    """One extra path from every eligible hit to every receiver it sees.

    Amplitudes are evaluated in bulk: the field reaching the hit (with its
    reflection history) is re-radiated with the Lambertian weight and the
    footprint spreading of the ray tube.
    """
    tx = np.asarray(tx, float)
    rx_points = np.asarray(rx_points, float).reshape(-1, 3)
    m = len(rx_points)
    hits = np.flatnonzero(_remaining(params, res.hit_depth) >= 0)
    if not len(hits) or params.roughness <= 0:
        return {q: _empty_bundle(scene, tx, rx_points[q], res, params) for q in range(m)}
    solid_angle = 4.0 * math.pi / res.n_rays
    nrm = _oriented_normals(scene, res, hits)
    lam = carrier.wavelength
    k = carrier.wavenumber
    acc_h, acc_q, acc_a, acc_l = [], [], [], []
    for s in range(0, len(hits) * m, PAIR_CHUNK):
        flat = np.arange(s, min(s + PAIR_CHUNK, len(hits) * m))
        hi, q = flat // m, flat % m
        h = hits[hi]
        p = res.hit_point[h]
        w = rx_points[q] - p
        rs = np.linalg.norm(w, axis=1)
        cos_s = np.einsum("ij,ij->i", w, nrm[hi]) / np.where(rs > 0, rs, 1.0)
        ok = (rs > MIN_SEGMENT) & (cos_s > 1e-12)
        if not ok.any():
            continue
        idx = np.flatnonzero(ok)
        idx = idx[visible_batch(scene, p[idx], rx_points[q[idx]])]
        hh = h[idx]
        Li = res.hit_len[hh]
        r = rs[idx]
        cos_i = np.abs(np.einsum("ij,ij->i", res.hit_kin[hh], nrm[hi[idx]]))
        c = params.roughness * np.sqrt(cos_i * cos_s[idx] / math.pi)
        with np.errstate(divide="ignore", invalid="ignore"):
            g = np.sqrt(solid_angle * Li * Li / cos_i) * (Li + r) / (Li * r)
        e_mag = np.linalg.norm(res.hit_field[hh], axis=1)
        total = Li + r
        amp = lam / (4.0 * math.pi * total) * np.exp(-1j * k * total) * c * g * e_mag
        good = np.isfinite(amp)
        acc_h.append(hh[good])
        acc_q.append(q[idx][good])
        acc_a.append(amp[good])
        acc_l.append(total[good])
    if acc_h:
        hh, qq, aa, ll = (np.concatenate(x) for x in (acc_h, acc_q, acc_a, acc_l))
    else:
        hh, qq, aa, ll = np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, complex), np.zeros(0)
    if stats is not None:
        stats.hits += len(hh)
    order = np.argsort(qq, kind="stable")
    hh, qq, aa, ll = hh[order], qq[order], aa[order], ll[order]
    bounds = np.searchsorted(qq, np.arange(m + 1))
    out = {}
    for q in range(m):
        sl = slice(bounds[q], bounds[q + 1])
        out[q] = ScatterBundle(scene, tx, rx_points[q].copy(), res, hh[sl], aa[sl], ll[sl],
                               params.roughness, solid_angle)
    return out


def _hemisphere_basis(n: np.ndarray):
    """Orthonormal (u, v) completing each normal ``n`` (rows)."""
    helper = np.where(np.abs(n[:, 2:3]) < 0.9, [[0.0, 0.0, 1.0]], [[1.0, 0.0, 0.0]])
    u = np.cross(helper, n)
    u /= np.linalg.norm(u, axis=1)[:, None]
    v = np.cross(n, u)
    return u, v


def re_emission(scene: Scene, tx, rx_points, params: TraceParams, res: LaunchResult,
                carrier: CarrierConfig, stats: Optional[TraceStats] = None,
                workers: int = 1) -> dict[int, tuple]:
    """Secondary hemisphere launch from every eligible hit.

    Each hit re-radiates on a ring grid of spacing ``params.reemission_deg``
    and the secondary rays bounce through the remaining reflection budget.
    The direct hit-to-receiver paths of :func:`single_spawn` are included.
    Returns, per receiver, ``(explicit_paths, bundle)``.
    """
    tx = np.asarray(tx, float)
    rx_points = np.asarray(rx_points, float).reshape(-1, 3)
    bundles = single_spawn(scene, tx, rx_points, params, res, carrier, stats)
    out = {q: [] for q in range(len(rx_points))}
    rem = _remaining(params, res.hit_depth)
    hits = np.flatnonzero(rem >= 1)
    if not len(hits) or params.roughness <= 0:
        return {q: (out[q], bundles[q]) for q in out}
    local = grid_directions(params.reemission_deg, hemisphere=True)
    spacing = effective_spacing(local)
    ns = len(local)
    solid_angle = 4.0 * math.pi / res.n_rays
    grid = ReceiverGrid.build(rx_points)
    per_chunk = max(1, SECONDARY_CHUNK // ns)
    for s in range(0, len(hits), per_chunk):
        hc = hits[s : s + per_chunk]
        nrm = _oriented_normals(scene, res, hc)
        u, v = _hemisphere_basis(nrm)
        dirs = (local[None, :, 0:1] * u[:, None] + local[None, :, 1:2] * v[:, None]
                + local[None, :, 2:3] * nrm[:, None]).reshape(-1, 3)
        origins = np.repeat(res.hit_point[hc], ns, axis=0)
        budget = np.repeat(rem[hc], ns)
        sec = run_launch(scene, origins, dirs, 0.0, budget, params.reception_alpha * spacing, rx_points,
                         carrier, workers=workers, grid=grid)
        if stats is not None:
            stats.secondary_rays += sec.n_rays
            stats.segments += sec.n_segments
        owner = hc[sec.cap_ray // ns]
        found = correct_captures(scene, res.hit_point[owner], rx_points, sec.cap_rx, sec.cap_depth,
                                 sec.cap_seq, owners=owner)
        for h, q, seq, pts in found:
            inter = _prefix(res, scene, h)
            inter.append(_scatter_interaction(res, scene, h, params, solid_angle))
            inter += [Interaction("R", pts[i].copy(), int(seq[i])) for i in range(len(seq))]
            out[q].append(PropagationPath(tx, rx_points[q].copy(), tuple(inter)))
    return {q: (out[q], bundles[q]) for q in out}


def scatter_paths(scene: Scene, tx, rx_points, params: TraceParams, res: LaunchResult,
                  carrier: CarrierConfig, mode: Optional[str] = None, stats: Optional[TraceStats] = None,
                  workers: int = 1) -> dict[int, tuple]:
    """Per receiver ``(explicit_paths, bundle)`` of scatter paths for ``mode``."""
    mode = mode or params.scatter_mode
    if mode == "single":
        return {q: ([], b) for q, b in single_spawn(scene, tx, rx_points, params, res, carrier, stats).items()}
    if mode == "reemit":
        return re_emission(scene, tx, rx_points, params, res, carrier, stats, workers)
    raise ValueError(f"unknown scatter mode {mode!r}")
