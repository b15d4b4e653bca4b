"""Launch direction sets."""
from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
from scipy.spatial import cKDTree

GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


def fibonacci_directions(ns: int) -> np.ndarray:
    """``ns`` unit vectors on the golden-angle spherical lattice, shape (ns, 3)."""
    ns = int(ns)
    if ns < 1:
        raise ValueError(f"number of samples must be >= 1, got {ns}")
    if ns == 1:
        return np.array([[0.0, 0.0, 1.0]])
    i = np.arange(ns, dtype=float)
    z = 1.0 - (2.0 * i + 1.0) / ns
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = GOLDEN_ANGLE * i
    d = np.column_stack((r * np.cos(phi), r * np.sin(phi), z))
    return d / np.linalg.norm(d, axis=1)[:, None]


def grid_directions(delta_deg: float, hemisphere: bool = False) -> np.ndarray:
    """Latitude rings spaced ``delta_deg`` apart, each ring evenly filled.

    Ring ``i`` sits at polar angle ``(i + 1/2) * delta`` and holds
    ``round(2 pi sin(theta) / delta)`` points; odd rings are rotated by half a
    step so neighbouring rings interleave. ``hemisphere=True`` keeps only the
    rings with ``z > 0``.
    """
    if not 0.0 < delta_deg <= 90.0:
        raise ValueError(f"angular separation must lie in (0, 90] degrees, got {delta_deg}")
    dt = math.radians(delta_deg)
    n_rings = max(1, int(round(math.pi / dt)))
    step = math.pi / n_rings
    out = []
    for i in range(n_rings):
        theta = (i + 0.5) * step
        if hemisphere and theta >= math.pi / 2:
            break
        m = max(1, int(round(2.0 * math.pi * math.sin(theta) / dt)))
        phi = (np.arange(m) + (0.5 if i % 2 else 0.0)) * (2.0 * math.pi / m)
        st = math.sin(theta)
        out.append(np.column_stack((st * np.cos(phi), st * np.sin(phi), np.full(m, math.cos(theta)))))
    return np.concatenate(out)


def nearest_neighbor_angles(dirs: np.ndarray) -> np.ndarray:
    """Angle from every direction to its closest neighbour (radians)."""
    dirs = np.asarray(dirs, float)
    if len(dirs) < 2:
        return np.full(len(dirs), math.pi)
    dist, _ = cKDTree(dirs).query(dirs, k=2)
    return 2.0 * np.arcsin(np.clip(dist[:, 1] / 2.0, 0.0, 1.0))


def effective_spacing(dirs: np.ndarray) -> float:
    """Mean nearest-neighbour angle, the spacing used by the reception sphere."""
    return float(nearest_neighbor_angles(dirs).mean())


@lru_cache(maxsize=16)
def _cached(kind: str, value: float):
    dirs = fibonacci_directions(int(value)) if kind == "ns" else grid_directions(value)
    dirs.setflags(write=False)
    return dirs, effective_spacing(dirs)


def launch_directions(params) -> tuple[np.ndarray, float]:
    """Directions and effective spacing for the sampling set in ``params``."""
    if params.num_samples is not None:
        return _cached("ns", float(int(params.num_samples)))
    if params.angular_separation is not None:
        return _cached("as", float(params.angular_separation))
    raise ValueError("SBR needs angular_separation or num_samples")
