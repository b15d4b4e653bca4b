"""Deterministic synthetic scenes and transceiver layouts.

Everything here is generated from closed-form sequences; no random state is
involved, so repeated calls return identical geometry.
"""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .em import CONCRETE, Material
from .geometry import Scene, write_obj

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
CITY_MEAN_HEIGHT = 14.29
TX_HEIGHT = 7.0
RX_HEIGHT = 1.5


def box_triangles(x0, y0, z0, x1, y1, z1, floor: bool = True, inward: bool = False) -> list:
    """Triangles of an axis-aligned box, normals pointing out (or in)."""
    c = [
        (x0, y0, z0), (x1, y0, z0), (x1, y1, z0), (x0, y1, z0),
        (x0, y0, z1), (x1, y0, z1), (x1, y1, z1), (x0, y1, z1),
    ]
    quads = [
        (4, 5, 6, 7),   # top
        (0, 1, 5, 4),   # south
        (1, 2, 6, 5),   # east
        (2, 3, 7, 6),   # north
        (3, 0, 4, 7),   # west
    ]
    if floor:
        quads.append((0, 3, 2, 1))
    tris = []
    for a, b, cc, d in quads:
        t1, t2 = (c[a], c[b], c[cc]), (c[a], c[cc], c[d])
        if inward:
            t1, t2 = t1[::-1], t2[::-1]
        tris += [t1, t2]
    return tris


def building_triangles(x0, y0, x1, y1, height) -> list:
    """Rectangular extrusion standing on the ground: four walls and a roof."""
    return box_triangles(x0, y0, 0.0, x1, y1, height, floor=False)


def unit_cube() -> list:
    return box_triangles(0.0, 0.0, 0.0, 1.0, 1.0, 1.0)


def box_room(size=(10.0, 8.0, 4.0), material: Material = CONCRETE) -> Scene:
    """Closed six-surface room without a separate ground plane."""
    x, y, z = size
    tris = box_triangles(0.0, 0.0, 0.0, x, y, z, inward=True)
    return Scene(tris, [0] * len(tris), [material], margin_m=1.0, ground=False)


def wall(x0, y0, x1, y1, height) -> list:
    """A single vertical rectangle (two triangles)."""
    a, b = (x0, y0, 0.0), (x1, y1, 0.0)
    c, d = (x1, y1, height), (x0, y0, height)
    return [(a, b, c), (a, c, d)]


def thin_slab(x0, y0, x1, y1, height, thickness=0.2) -> list:
    """A wall with finite thickness along its normal."""
    dx, dy = x1 - x0, y1 - y0
    L = math.hypot(dx, dy)
    nx, ny = -dy / L * thickness / 2, dx / L * thickness / 2
    if abs(dx) >= abs(dy):
        return building_triangles(min(x0, x1), y0 - abs(ny) - abs(nx), max(x0, x1), y0 + abs(ny) + abs(nx), height)
    return building_triangles(x0 - abs(nx) - abs(ny), min(y0, y1), x0 + abs(nx) + abs(ny), max(y0, y1), height)


def parallel_walls(gap=10.0, length=20.0, height=6.0) -> Scene:
    tris = wall(0.0, 0.0, length, 0.0, height) + wall(length, gap, 0.0, gap, height)
    return Scene(tris, [0] * len(tris), [CONCRETE], margin_m=10.0)


def two_occlusion_scene() -> tuple[Scene, np.ndarray, np.ndarray]:
    """Fixture where the receiver is reachable only through a reflection plus a diffraction.

    Block ``B1`` hides the receiver; the transmitter sees ``B1``'s north-east
    corner only past a small block ``B2`` that shadows it. A reflector wall to
    the north feeds that corner, so the receiver needs a reflection followed
    by a diffraction. Returns ``(scene, tx, rx)``.
    """
    tris = []
    tris += building_triangles(10.0, -30.0, 30.0, 0.0, 40.0)    # B1, main occluder
    tris += building_triangles(16.0, 1.0, 24.0, 6.0, 40.0)      # B2, shadows the corner from tx
    tris += building_triangles(-12.0, 25.0, 24.0, 26.0, 40.0)   # reflector
    scene = Scene(tris, [0] * len(tris), [CONCRETE], margin_m=20.0)
    tx = np.array([0.0, 10.0, 1.5])
    rx = np.array([35.0, -25.0, 1.5])
    return scene, tx, rx


def _fractional(i: int, a: float = GOLDEN) -> float:
    return (i * a) % 1.0


def city_blocks(nx: int = 8, ny: int = 7, block: float = 30.0, street: float = 20.0,
                mean_height: float = CITY_MEAN_HEIGHT) -> tuple[list, list]:
    """Footprints and heights of a grid city.

    Each block holds one building whose footprint is inset by a varying
    amount; heights follow a golden-ratio sequence and are rescaled so the
    mean building height is exactly ``mean_height``.
    """
    foot, raw = [], []
    pitch = block + street
    k = 0
    for j in range(ny):
        for i in range(nx):
            x0 = i * pitch
            y0 = j * pitch
            inset_x = 2.0 + 6.0 * _fractional(k, 0.7548776662466927)
            inset_y = 2.0 + 6.0 * _fractional(k, 0.5698402909980532)
            foot.append((x0 + inset_x, y0 + inset_y, x0 + block - inset_x / 2, y0 + block - inset_y / 2))
            raw.append(6.0 + 20.0 * _fractional(k + 1))
            k += 1
    raw = np.array(raw)
    heights = raw * (mean_height / raw.mean())
    return foot, heights.tolist()


def city_triangles(**kw) -> list:
    foot, heights = city_blocks(**kw)
    tris = []
    for (x0, y0, x1, y1), h in zip(foot, heights):
        tris += building_triangles(x0, y0, x1, y1, h)
    return tris


def city_scene(margin_m: float = 50.0, **kw) -> Scene:
    tris = city_triangles(**kw)
    return Scene(tris, [0] * len(tris), [CONCRETE], margin_m=margin_m)


def write_city_obj(path, **kw) -> Path:
    tris = city_triangles(**kw)
    write_obj(path, tris, ["concrete"] * len(tris))
    return Path(path)


def city_positions(n_tx: int = 6, n_rx: int = 51, nx: int = 8, ny: int = 7, block: float = 30.0,
                   street: float = 20.0) -> tuple[np.ndarray, np.ndarray]:
    """Transmitters at street crossings (7 m) and receivers along streets (1.5 m)."""
    pitch = block + street
    tx = []
    for k in range(n_tx):
        i = (3 * k + 1) % (nx - 1)
        j = k % (ny - 1)
        tx.append((block + street / 2 + i * pitch, block + street / 2 + j * pitch, TX_HEIGHT))
    tx = np.array(tx)
    rx = []
    length_x = nx * pitch - street
    k = 0
    while len(rx) < n_rx:
        j = k % (ny - 1)
        s = _fractional(k + 3)
        if k % 2 == 0:
            rx.append((s * length_x, block + street / 2 + j * pitch + (s - 0.5) * 8.0, RX_HEIGHT))
        else:
            i = k % (nx - 1)
            rx.append((block + street / 2 + i * pitch + (s - 0.5) * 8.0, s * (ny * pitch - street), RX_HEIGHT))
        k += 1
    return tx, np.array(rx)


def write_positions(path, tx: np.ndarray, rx: np.ndarray) -> Path:
    with open(path, "w") as fh:
        fh.write("id,role,x,y,z\n")
        for i, p in enumerate(tx):
            fh.write(f"T{i},tx,{float(p[0])!r},{float(p[1])!r},{float(p[2])!r}\n")
        for i, p in enumerate(rx):
            fh.write(f"R{i},rx,{float(p[0])!r},{float(p[1])!r},{float(p[2])!r}\n")
    return Path(path)


def _concrete_scene(tris, margin_m=20.0) -> Scene:
    return Scene(tris, [0] * len(tris), [CONCRETE], margin_m=margin_m)


def equivalence_scenes() -> list[tuple[str, Scene, np.ndarray, np.ndarray]]:
    """Five small scenes (at most 50 faces) with one Tx/Rx pair each."""
    b = building_triangles
    return [
        ("room", box_room(), np.array([2.0, 3.0, 2.0]), np.array([7.5, 5.0, 1.2])),
        ("walls", parallel_walls(), np.array([3.0, 4.0, 2.0]), np.array([15.0, 6.0, 1.5])),
        ("block", _concrete_scene(b(0, 0, 10, 8, 12)), np.array([-8.0, -6.0, 5.0]), np.array([14.0, -3.0, 1.5])),
        ("canyon", _concrete_scene(b(0, 0, 10, 8, 12) + b(14, 0, 24, 8, 9) + b(0, 14, 10, 22, 15)
                                   + b(14, 14, 24, 22, 11)),
         np.array([12.0, -5.0, 7.0]), np.array([11.0, 27.0, 1.5])),
        ("corner", _concrete_scene(b(0, 0, 10, 8, 12) + b(-12, 12, -2, 22, 18) + b(14, 10, 24, 30, 7)),
         np.array([-6.0, 4.0, 7.0]), np.array([8.0, 20.0, 1.5])),
    ]
