"""Channel-gain radio maps over a uniform receiver grid."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import _bvh
from .em import CarrierConfig
from .repro import header_lines
from .tracer import TraceParams, trace

FLOOR_DB = -250.0
NODATA_VALUE = -9999.0
DEFAULT_WINDOW = (-160.0, -70.0)
COMBINE = ("coherent", "incoherent")


@dataclass(frozen=True)
class GridSpec:
    """Cell ``(i, j)`` is centred at ``origin + ((i + 1/2) res, (j + 1/2) res)``."""

    origin: tuple
    nx: int
    ny: int
    resolution: float = 10.0
    rx_height: float = 1.5

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError("grid resolution must be positive")
        if self.nx < 1 or self.ny < 1:
            raise ValueError("grid needs at least one cell in each direction")

    @classmethod
    def covering(cls, scene, resolution: float = 10.0, rx_height: float = 1.5) -> "GridSpec":
        """Grid over the scene footprint (building box plus margin)."""
        lo, hi = scene.bounds
        nx = max(1, int(math.floor((hi[0] - lo[0]) / resolution)))
        ny = max(1, int(math.floor((hi[1] - lo[1]) / resolution)))
        return cls((float(lo[0]), float(lo[1])), nx, ny, float(resolution), float(rx_height))

    def centers(self) -> np.ndarray:
        """Cell centres, shape (nx, ny, 3)."""
        x = self.origin[0] + (np.arange(self.nx) + 0.5) * self.resolution
        y = self.origin[1] + (np.arange(self.ny) + 0.5) * self.resolution
        X, Y = np.meshgrid(x, y, indexing="ij")
        return np.stack([X, Y, np.full_like(X, self.rx_height)], axis=-1)


@dataclass
class RadioMap:
    spec: GridSpec
    gains_db: np.ndarray            # (nx, ny); NaN marks nodata
    meta: dict = field(default_factory=dict)

    @property
    def nodata(self) -> np.ndarray:
        return np.isnan(self.gains_db)

    def rows_north_to_south(self) -> np.ndarray:
        """(ny, nx) array, first row northernmost."""
        return self.gains_db.T[::-1]


def inside_buildings(scene, points: np.ndarray) -> np.ndarray:
    """Crossing-parity test of a vertical ray from every point against building triangles."""
    nb = scene.n_building
    pts = np.asarray(points, float).reshape(-1, 3)
    out = np.zeros(len(pts), dtype=bool)
    if nb == 0:
        return out
    v0, e1, e2 = scene.v0[:nb], scene.e1[:nb], scene.e2[:nb]
    up = np.array([0.0, 0.0, 1.0])
    for i, p in enumerate(pts):
        out[i] = _bvh.count_distinct_hits(p, up, np.inf, v0, e1, e2) % 2 == 1
    return out


def combine_gain_db(amplitudes: np.ndarray, combine: str = "coherent") -> float:
    a = np.asarray(amplitudes, dtype=complex)
    if combine == "coherent":
        p = abs(a.sum()) ** 2
    elif combine == "incoherent":
        p = float(np.sum(np.abs(a) ** 2))
    else:
        raise ValueError(f"combine must be one of {COMBINE}, got {combine!r}")
    return 10.0 * math.log10(p) if p > 0 else FLOOR_DB


def compute_radio_map(scene, tx, spec: GridSpec, params: TraceParams, combine: str = "coherent",
                      carrier: Optional[CarrierConfig] = None, workers: int = 1) -> RadioMap:
    """Gain of every grid cell from one shared trace with all cell centres as receivers."""
    if combine not in COMBINE:
        raise ValueError(f"combine must be one of {COMBINE}, got {combine!r}")
    tx = np.asarray(tx, float)
    if not scene.contains(tx):
        raise ValueError(f"transmitter {tx.tolist()} outside scene bounds")
    centers = spec.centers().reshape(-1, 3)
    lo, hi = scene.bounds
    if (centers < lo).any() or (centers > hi).any():
        raise ValueError("radio map grid extends outside the scene bounds")
    blocked = inside_buildings(scene, centers)
    live = np.flatnonzero(~blocked)
    gains = np.full(len(centers), np.nan)
    if len(live):
        res = trace(scene, tx, centers[live], params, carrier=carrier, workers=workers)
        for q, cell in enumerate(live):
            gains[cell] = combine_gain_db(res[q].amplitudes(), combine)
    meta = {"tx": tx.tolist(), "combine": combine}
    return RadioMap(spec, gains.reshape(spec.nx, spec.ny), meta)


def export_map(rmap: RadioMap, path, fmt: str = "grid", window=DEFAULT_WINDOW,
               header_params: Optional[dict] = None, header: bool = True) -> Path:
    """Write a grid table (``fmt='grid'``) or an 8-bit portable graymap (``fmt='pgm'``).

    ``header=False`` omits the reproducibility comment lines, which carry the
    host description and so differ between machines.
    """
    path = Path(path)
    hp = header_params if header_params is not None else {}
    comments = header_lines(hp) if header else []
    s = rmap.spec
    rows = rmap.rows_north_to_south()
    if fmt == "grid":
        with open(path, "w") as fh:
            for line in comments:
                fh.write(f"# {line}\n")
            fh.write(f"ncols {s.nx}\nnrows {s.ny}\n")
            fh.write(f"xllcorner {float(s.origin[0])!r}\nyllcorner {float(s.origin[1])!r}\n")
            fh.write(f"cellsize {float(s.resolution)!r}\nNODATA_value {NODATA_VALUE:.0f}\n")
            for r in rows:
                fh.write(" ".join(f"{NODATA_VALUE:.0f}" if np.isnan(v) else f"{v:.6f}" for v in r) + "\n")
    elif fmt == "pgm":
        lo, hi = window
        if not hi > lo:
            raise ValueError("render window must have hi > lo")
        x = np.clip((rows - lo) / (hi - lo), 0.0, 1.0)
        img = np.where(np.isnan(rows), 0, 1 + np.rint(254.0 * np.nan_to_num(x))).astype(np.uint8)
        with open(path, "wb") as fh:
            fh.write(b"P5\n")
            for line in comments + [f"window_db: {float(lo)!r} {float(hi)!r}"]:
                fh.write(f"# {line}\n".encode())
            fh.write(f"{s.nx} {s.ny}\n255\n".encode())
            fh.write(img.tobytes())
    else:
        raise ValueError(f"unknown map format {fmt!r}")
    return path


def parse_grid_table(path, rx_height: float = 1.5) -> RadioMap:
    head = {}
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            parts = line.split()
            if len(head) < 6:
                head[parts[0].lower()] = float(parts[1])
                continue
            rows.append([float(v) for v in parts])
    nx, ny = int(head["ncols"]), int(head["nrows"])
    arr = np.array(rows, dtype=float).reshape(ny, nx)
    arr[arr == head["nodata_value"]] = np.nan
    spec = GridSpec((head["xllcorner"], head["yllcorner"]), nx, ny, head["cellsize"], rx_height)
    return RadioMap(spec, arr[::-1].T.copy())


def read_pgm(path) -> tuple[int, int, np.ndarray]:
    """Width, height and pixel rows of a binary graymap written by :func:`export_map`."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    pos += 1
    if tokens[0] != b"P5":
        raise ValueError("not a binary graymap")
    w, h = int(tokens[1]), int(tokens[2])
    return w, h, np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w)
