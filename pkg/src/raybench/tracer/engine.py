"""Trace dispatcher: image method or the SBR pipeline, then merge and amplitudes."""
from __future__ import annotations

import json
from typing import Optional

import numpy as np

from ..em import CarrierConfig, GeometryRejected, path_amplitude
from ..geometry import Scene
from .diffraction import EdgeTables, diffraction_paths
from .image import trace_image_method
from .paths import PathList, PropagationPath, TraceParams, TraceStats, merge_paths
from .sbr import launch_sbr
from .scatter import scatter_paths


def fill_amplitudes(paths, scene: Scene, carrier: CarrierConfig) -> list[PropagationPath]:
    out = []
    for p in paths:
        if p.amplitude is None:
            try:
                p = p.with_amplitude(path_amplitude(p, scene, carrier))
            except GeometryRejected:
                continue
        out.append(p)
    return out


def _diffraction_settings(params: TraceParams):
    """(enabled, reflections allowed next to the edge)."""
    if params.diffraction_depth < 1:
        return False, 0
    if params.depth_mode == "joint":
        depth = params.max_depth or 0
        return depth >= 1, min(params.combine_max_reflections, depth - 1)
    return True, min(params.combine_max_reflections, params.max_reflections)


def trace(scene: Scene, tx, rx_set, params: TraceParams, carrier: Optional[CarrierConfig] = None,
          stats: Optional[TraceStats] = None, workers: int = 1) -> dict[int, PathList]:
    """Paths from ``tx`` to every receiver in ``rx_set``, keyed by receiver index."""
    params.validate()
    carrier = carrier or CarrierConfig()
    tx = np.asarray(tx, float)
    rx_points = np.asarray(rx_set, float).reshape(-1, 3)
    groups: dict[int, list] = {q: [] for q in range(len(rx_points))}
    bundles: dict[int, list] = {q: [] for q in range(len(rx_points))}

    if params.method == "image":
        for q, rx in enumerate(rx_points):
            groups[q].append(trace_image_method(scene, tx, rx, params.reflection_budget, stats=stats))
    else:
        base, launch = launch_sbr(scene, tx, rx_points, params, carrier, stats=stats, workers=workers,
                                  record_hits=params.scattering, _return_launch=True)
        for q, lst in base.items():
            groups[q].append(lst)
        if params.scattering:
            sc = scatter_paths(scene, tx, rx_points, params, launch, carrier, stats=stats, workers=workers)
            for q, (lst, bundle) in sc.items():
                groups[q].append(lst)
                bundles[q].append(bundle)

    enabled, n_comb = _diffraction_settings(params)
    if enabled and len(scene.edges):
        etab = EdgeTables(scene)
        combine = params.combine_diffraction and n_comb >= 1
        for q, rx in enumerate(rx_points):
            groups[q].append(diffraction_paths(scene, tx, rx, combine_with_reflections=combine,
                                               max_reflections=n_comb, stats=stats, etab=etab))

    return {
        q: PathList(fill_amplitudes(merge_paths(*g), scene, carrier), bundles[q])
        for q, g in groups.items()
    }


def path_record(p: PropagationPath, tx_id=None, rx_id=None) -> dict:
    amp = p.amplitude
    rec = {}
    if tx_id is not None:
        rec["tx"] = tx_id
    if rx_id is not None:
        rec["rx"] = rx_id
    rec["signature"] = [[k, r] for k, r in p.signature]
    rec["points"] = p.points.tolist()
    rec["length"] = p.total_length
    if amp is not None:
        rec["delay"] = amp.delay
        rec["gain_db"] = amp.gain_db
        rec["amplitude"] = [amp.amplitude.real, amp.amplitude.imag]
    return rec


def write_path_dump(fh, header: dict, records) -> None:
    """Line-delimited JSON: a header object, then one path per line."""
    fh.write(json.dumps({"header": header}, sort_keys=True) + "\n")
    for rec in records:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
