"""Scene geometry: mesh loading, acceleration index, ray and edge queries."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import _bvh
from .em import CONCRETE, KNIFE_EDGE_ANGLE, CarrierConfig, Material, complex_permittivity

EPS_HIT = 1e-4
DEFAULT_MARGIN = 50.0
EDGE_ANGLE_THRESHOLD = math.radians(10.0)
MIN_AREA = 1e-9
GROUND_TOL = 1e-9
_KEY_DECIMALS = 9


class MeshParseError(ValueError):
    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


class MeshValidationError(ValueError):
    pass


class EmptySceneError(ValueError):
    pass


@dataclass(frozen=True)
class Triangle:
    v0: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    material_id: int
    face_id: int

    @property
    def area(self) -> float:
        return 0.5 * float(np.linalg.norm(np.cross(self.v1 - self.v0, self.v2 - self.v0)))


@dataclass(frozen=True)
class Surface:
    """Edge-connected set of coplanar triangles sharing one material.

    This is the "planar surface" the image method enumerates over; a quad
    split in two triangles is one surface.
    """

    sid: int
    triangles: tuple
    normal: np.ndarray
    offset: float          # plane: dot(normal, x) == offset
    material_id: int
    is_ground: bool = False


@dataclass(frozen=True)
class DiffractionEdge:
    p0: np.ndarray
    p1: np.ndarray
    face_a: int
    face_b: int            # -1 for a boundary (knife) edge
    interior_angle: float
    normal_a: np.ndarray   # exterior side of face a
    tangent_a: np.ndarray  # in face a, perpendicular to the edge, pointing into the face
    material_id: int

    @property
    def direction(self) -> np.ndarray:
        d = self.p1 - self.p0
        return d / np.linalg.norm(d)

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.p1 - self.p0))

    @property
    def n(self) -> float:
        """Exterior wedge angle in units of pi."""
        return (2.0 * math.pi - self.interior_angle) / math.pi

    def point(self, t: float) -> np.ndarray:
        return self.p0 + t * (self.p1 - self.p0)


@dataclass(frozen=True)
class RayHit:
    t: float
    point: np.ndarray
    face_id: int
    normal: np.ndarray
    material_id: int


# ---------------------------------------------------------------------------
# mesh input


def read_obj(path) -> tuple[np.ndarray, list[tuple[list[int], Optional[str]]]]:
    """Parse a Wavefront OBJ triangle/polygon soup.

    Returns the vertex array and a list of ``(vertex indices, material name)``
    polygons (0-based indices). Only ``v``, ``f`` and ``usemtl`` carry
    meaning; the remaining statements are ignored.
    """
    verts = []
    polys = []
    material = None
    path = str(path)
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            kw = tok[0]
            if kw == "v":
                if len(tok) < 4:
                    raise MeshParseError(path, lineno, "vertex needs 3 coordinates")
                try:
                    verts.append([float(x) for x in tok[1:4]])
                except ValueError:
                    raise MeshParseError(path, lineno, f"bad vertex {line!r}") from None
            elif kw == "f":
                if len(tok) < 4:
                    raise MeshParseError(path, lineno, "face needs at least 3 vertices")
                idx = []
                for t in tok[1:]:
                    try:
                        i = int(t.split("/")[0])
                    except ValueError:
                        raise MeshParseError(path, lineno, f"bad face index {t!r}") from None
                    i = i - 1 if i > 0 else len(verts) + i
                    if not 0 <= i < len(verts):
                        raise MeshParseError(path, lineno, f"face index {t} out of range")
                    idx.append(i)
                polys.append((idx, material))
            elif kw == "usemtl":
                material = tok[1] if len(tok) > 1 else None
    v = np.array(verts, dtype=np.float64).reshape(-1, 3)
    bad = np.flatnonzero(~np.isfinite(v).all(axis=1))
    if len(bad):
        raise MeshValidationError(f"{path}: vertex {bad[0] + 1} is not finite: {v[bad[0]].tolist()}")
    return v, polys


def write_obj(path, triangles: Iterable[Sequence], material_names: Optional[Sequence[str]] = None) -> None:
    """Write triangles (each three 3D points) as an OBJ file, one ``usemtl`` group per material."""
    triangles = [np.asarray(t, dtype=float) for t in triangles]
    names = list(material_names) if material_names is not None else [None] * len(triangles)
    with open(path, "w") as fh:
        for t in triangles:
            for p in t:
                fh.write(f"v {float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n")
        current = None
        for i, name in enumerate(names):
            if name is not None and name != current:
                fh.write(f"usemtl {name}\n")
                current = name
            b = 3 * i + 1
            fh.write(f"f {b} {b + 1} {b + 2}\n")


def _fan(polys, v):
    tris, mats = [], []
    for idx, mat in polys:
        for k in range(1, len(idx) - 1):
            tris.append((v[idx[0]], v[idx[k]], v[idx[k + 1]]))
            mats.append(mat)
    return tris, mats


# ---------------------------------------------------------------------------
# scene


class Scene:
    """Immutable triangulated environment with ground, bounds, BVH and edges.

    Triangle ``face_id`` equals its index in the scene arrays; building
    triangles come first, the two ground triangles last.
    """

    def __init__(
        self,
        triangles: Sequence[Sequence],
        material_ids: Sequence[int],
        materials: Sequence[Material],
        margin_m: float = DEFAULT_MARGIN,
        ground: bool = True,
        ground_material_id: int = 0,
        extent: Optional[tuple[float, float, float, float]] = None,
        edge_angle_threshold: float = EDGE_ANGLE_THRESHOLD,
    ):
        tri = np.asarray(triangles, dtype=np.float64).reshape(-1, 3, 3)
        mids = np.asarray(material_ids, dtype=np.int64).reshape(-1)
        if not np.isfinite(tri).all():
            raise MeshValidationError("non-finite vertex in scene triangles")
        area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
        keep = area > MIN_AREA
        tri, mids = tri[keep], mids[keep]
        if len(tri) == 0 and extent is None:
            raise EmptySceneError("scene has no triangles")
        self.materials = tuple(materials)
        self.margin_m = float(margin_m)
        self.n_building = len(tri)

        if extent is None:
            lo = tri.reshape(-1, 3).min(axis=0)
            hi = tri.reshape(-1, 3).max(axis=0)
            x0, x1, y0, y1 = lo[0], hi[0], lo[1], hi[1]
            z0, z1 = min(0.0, lo[2]), hi[2]
        else:
            x0, x1, y0, y1 = extent
            z0, z1 = 0.0, 0.0
            if len(tri):
                z0 = min(0.0, tri[..., 2].min())
                z1 = tri[..., 2].max()
        m = self.margin_m
        # vertical headroom is not part of the margin contract; keep it generous
        self.bounds = np.array([[x0 - m, y0 - m, z0 - 1.0], [x1 + m, y1 + m, z1 + max(m, DEFAULT_MARGIN)]])

        gtri = np.zeros((0, 3, 3))
        if ground:
            (bx0, by0, _), (bx1, by1, _) = self.bounds
            a, b, c, d = [bx0, by0, 0.0], [bx1, by1, 0.0], [bx1, by0, 0.0], [bx0, by1, 0.0]
            gtri = np.array([[a, c, b], [a, b, d]])
        all_tri = np.concatenate([tri, gtri]) if len(gtri) else tri
        all_mid = np.concatenate([mids, np.full(len(gtri), ground_material_id, dtype=np.int64)])
        self.v0 = np.ascontiguousarray(all_tri[:, 0])
        self.v1 = np.ascontiguousarray(all_tri[:, 1])
        self.v2 = np.ascontiguousarray(all_tri[:, 2])
        self.e1 = np.ascontiguousarray(self.v1 - self.v0)
        self.e2 = np.ascontiguousarray(self.v2 - self.v0)
        nrm = np.cross(self.e1, self.e2)
        self.normals = nrm / np.linalg.norm(nrm, axis=1)[:, None]
        self.material_ids = all_mid
        self.is_ground = np.zeros(len(all_tri), dtype=bool)
        self.is_ground[self.n_building:] = True
        self.index = _bvh.build_bvh(self.v0, self.v1, self.v2)
        self.triangle_surface, self.surfaces = _group_surfaces(self)
        self.edges = tuple(
            e for e in extract_edges(self, edge_angle_threshold, building_only=True)
            if not (ground and _on_ground(e))
        )
        self._eta_cache: dict = {}

    # -- construction helpers ---------------------------------------------

    @classmethod
    def ground_only(cls, x0, x1, y0, y1, material: Material = CONCRETE, margin_m: float = 0.0):
        return cls([], [], [material], margin_m=margin_m, extent=(x0, x1, y0, y1))

    # -- views ----------------------------------------------------------------

    @property
    def n_triangles(self) -> int:
        return len(self.v0)

    @property
    def n_surfaces(self) -> int:
        return len(self.surfaces)

    def triangle(self, i: int) -> Triangle:
        return Triangle(self.v0[i], self.v1[i], self.v2[i], int(self.material_ids[i]), i)

    @cached_property
    def triangles(self) -> list[Triangle]:
        return [self.triangle(i) for i in range(self.n_building)]

    @cached_property
    def ground(self) -> list[Triangle]:
        return [self.triangle(i) for i in range(self.n_building, self.n_triangles)]

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.bounds[1] - self.bounds[0]))

    def contains(self, p) -> bool:
        p = np.asarray(p, float)
        return bool(np.all(p >= self.bounds[0]) and np.all(p <= self.bounds[1]))

    def eta(self, material_id: int, carrier: CarrierConfig) -> complex:
        key = (material_id, carrier.frequency)
        if key not in self._eta_cache:
            self._eta_cache[key] = complex_permittivity(self.materials[material_id], carrier.frequency)
        return self._eta_cache[key]

    def exit_distance(self, o, d) -> float:
        """Distance along the ray to where it leaves the bounds (absorbing boundary)."""
        with np.errstate(divide="ignore", invalid="ignore"):
            t0 = (self.bounds[0] - o) / d
            t1 = (self.bounds[1] - o) / d
        tf = np.where(d != 0, np.maximum(t0, t1), np.inf)
        return float(max(tf.min(), 0.0))

    def _kernel_args(self):
        ix = self.index
        return (ix.lo, ix.hi, ix.left, ix.right, ix.start, ix.count, ix.order, self.v0, self.e1, self.e2)

    def surface_contains(self, sid: int, p, tol: float = 1e-6) -> bool:
        """True if ``p`` lies on surface ``sid`` (plane distance and triangle cover within ``tol``)."""
        s = self.surfaces[sid]
        p = np.asarray(p, float)
        if abs(float(np.dot(s.normal, p)) - s.offset) > tol:
            return False
        for i in s.triangles:
            if _in_triangle(self.v0[i], self.e1[i], self.e2[i], p, tol):
                return True
        return False

    def building_components(self) -> list[np.ndarray]:
        """Triangle index groups of vertex-connected building solids."""
        n = self.n_building
        parent = np.arange(n)

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        owner: dict = {}
        for i in range(n):
            for v in (self.v0[i], self.v1[i], self.v2[i]):
                k = tuple(np.round(v, _KEY_DECIMALS))
                j = owner.setdefault(k, i)
                ra, rb = find(i), find(j)
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
        roots = np.array([find(i) for i in range(n)])
        return [np.flatnonzero(roots == r) for r in np.unique(roots)]

    def average_building_height(self) -> float:
        heights = []
        for comp in self.building_components():
            z = np.concatenate([self.v0[comp, 2], self.v1[comp, 2], self.v2[comp, 2]])
            heights.append(z.max() - min(0.0, z.min()))
        return float(np.mean(heights))

    def inside_building(self, p) -> bool:
        """Crossing parity of a vertical ray above ``p`` against building triangles."""
        p = np.asarray(p, float)
        if self.n_building == 0:
            return False
        n = _bvh.count_distinct_hits(
            p, np.array([0.0, 0.0, 1.0]), np.inf,
            self.v0[: self.n_building], self.e1[: self.n_building], self.e2[: self.n_building],
        )
        return n % 2 == 1


def _in_triangle(v0, e1, e2, p, tol):
    w = p - v0
    d00 = e1 @ e1
    d01 = e1 @ e2
    d11 = e2 @ e2
    d20 = w @ e1
    d21 = w @ e2
    den = d00 * d11 - d01 * d01
    v = (d11 * d20 - d01 * d21) / den
    u = (d00 * d21 - d01 * d20) / den
    # tolerance in metres, converted to barycentric units by the edge scale
    bt = tol / math.sqrt(max(d00, d11))
    return v >= -bt and u >= -bt and u + v <= 1.0 + bt


def _on_ground(edge: DiffractionEdge, tol: float = 1e-6) -> bool:
    return abs(edge.p0[2]) <= tol and abs(edge.p1[2]) <= tol


def _edge_map(scene, building_only):
    n = scene.n_building if building_only else scene.n_triangles
    emap: dict = {}
    for i in range(n):
        vs = (scene.v0[i], scene.v1[i], scene.v2[i])
        keys = [tuple(np.round(v, _KEY_DECIMALS)) for v in vs]
        for a, b in ((0, 1), (1, 2), (2, 0)):
            k = (keys[a], keys[b]) if keys[a] <= keys[b] else (keys[b], keys[a])
            emap.setdefault(k, []).append(i)
    return emap


def _group_surfaces(scene):
    n = scene.n_triangles
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    nr = scene.normals
    off = np.einsum("ij,ij->i", nr, scene.v0)
    for faces in _edge_map(scene, building_only=False).values():
        for a in faces:
            for b in faces:
                if a >= b or scene.material_ids[a] != scene.material_ids[b]:
                    continue
                if scene.is_ground[a] != scene.is_ground[b]:
                    continue
                c = float(nr[a] @ nr[b])
                if abs(abs(c) - 1.0) < 1e-9 and abs(math.copysign(1.0, c) * off[b] - off[a]) < 1e-6:
                    ra, rb = find(a), find(b)
                    if ra != rb:
                        parent[max(ra, rb)] = min(ra, rb)
    roots = [find(i) for i in range(n)]
    order = sorted(set(roots))
    sid_of_root = {r: s for s, r in enumerate(order)}
    tri_surface = np.array([sid_of_root[r] for r in roots], dtype=np.int64)
    surfaces = []
    for s, r in enumerate(order):
        members = tuple(int(i) for i in np.flatnonzero(tri_surface == s))
        surfaces.append(
            Surface(
                sid=s,
                triangles=members,
                normal=nr[r].copy(),
                offset=float(off[r]),
                material_id=int(scene.material_ids[r]),
                is_ground=bool(scene.is_ground[r]),
            )
        )
    return tri_surface, tuple(surfaces)


def extract_edges(scene, edge_angle_threshold: float = EDGE_ANGLE_THRESHOLD, building_only: bool = True):
    """Wedge and boundary edges of the scene mesh.

    Shared edges qualify when the faces deviate from coplanarity by more than
    ``edge_angle_threshold``; edges with a single adjacent face are always
    returned as knife edges. Edges shared by more than two faces are
    ambiguous and skipped. Output is ordered by adjacent face ids.
    """
    out = []
    cent = (scene.v0 + scene.v1 + scene.v2) / 3.0
    for key, faces in _edge_map(scene, building_only).items():
        if len(faces) > 2:
            continue
        p0, p1 = np.array(key[0]), np.array(key[1])
        e = p1 - p0
        if np.linalg.norm(e) < 1e-9:
            continue
        e = e / np.linalg.norm(e)
        fa = min(faces)
        na = scene.normals[fa]
        ta = np.cross(na, e)
        if (cent[fa] - p0) @ ta < 0:
            ta = -ta
        if len(faces) == 1:
            out.append(DiffractionEdge(p0, p1, int(fa), -1, KNIFE_EDGE_ANGLE, na.copy(), ta,
                                       int(scene.material_ids[fa])))
            continue
        fb = max(faces)
        nb = scene.normals[fb]
        tb = np.cross(nb, e)
        if (cent[fb] - p0) @ tb < 0:
            tb = -tb
        opening = math.acos(min(max(float(ta @ tb), -1.0), 1.0))
        convex = float(na @ tb) < 0.0
        interior = opening if convex else 2.0 * math.pi - opening
        if abs(math.pi - opening) <= edge_angle_threshold:
            continue
        out.append(DiffractionEdge(p0, p1, int(fa), int(fb), interior, na.copy(), ta,
                                   int(scene.material_ids[fa])))
    out.sort(key=lambda d: (d.face_a, d.face_b, tuple(d.p0), tuple(d.p1)))
    return out


def load_scene(mesh_source, material_table: dict[str, Material], margin_m: float = DEFAULT_MARGIN,
               edge_angle_threshold: float = EDGE_ANGLE_THRESHOLD) -> Scene:
    """Load one or more OBJ files into a :class:`Scene` with a synthesized ground.

    Polygons are fan-triangulated from their first vertex. Faces without a
    ``usemtl`` take the material named after the file stem if the table has
    it, else ``concrete``, else the first table entry. The ground uses
    ``ground`` or ``concrete`` from the table. Flat triangles lying at z=0
    are taken as ground-plane geometry: they widen the synthesized ground
    instead of entering the scene as buildings, so a mesh holding only a
    ground quad yields a ground-only scene.
    """
    sources = [mesh_source] if isinstance(mesh_source, (str, Path)) else list(mesh_source)
    names = list(material_table)
    materials = [material_table[n] for n in names]
    if "concrete" not in material_table and "ground" not in material_table:
        names.append("concrete")
        materials.append(CONCRETE)
    lookup = {n: i for i, n in enumerate(names)}

    def fallback(stem):
        if stem in lookup:
            return lookup[stem]
        return lookup.get("concrete", 0)

    tris, mids = [], []
    for src in sources:
        src = Path(src)
        v, polys = read_obj(src)
        t, mats = _fan(polys, v)
        for tri, mat in zip(t, mats):
            if mat is None:
                mid = fallback(src.stem)
            elif mat in lookup:
                mid = lookup[mat]
            else:
                raise MeshValidationError(f"{src}: material {mat!r} not in material table")
            tris.append(tri)
            mids.append(mid)
    if not tris:
        raise EmptySceneError(f"no triangles in {', '.join(map(str, sources))}")
    gid = lookup.get("ground", lookup.get("concrete", 0))
    arr = np.asarray(tris, dtype=np.float64).reshape(-1, 3, 3)
    flat = np.isfinite(arr).all(axis=(1, 2)) & (np.abs(arr[..., 2]) <= GROUND_TOL).all(axis=1)
    extent = None
    if flat.any():
        xy = arr[..., :2].reshape(-1, 2)[np.isfinite(arr[..., :2]).all(axis=2).reshape(-1)]
        extent = (xy[:, 0].min(), xy[:, 0].max(), xy[:, 1].min(), xy[:, 1].max())
        arr = arr[~flat]
        mids = [m for m, f in zip(mids, flat) if not f]
    return Scene(arr, mids, materials, margin_m=margin_m, ground_material_id=gid, extent=extent,
                 edge_angle_threshold=edge_angle_threshold)


# ---------------------------------------------------------------------------
# queries


def _check_unit(direction):
    d = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise ValueError("direction must be a unit vector")
    return d


def nearest_hit(scene: Scene, origin, direction, t_max: float = np.inf, brute_force: bool = False) -> Optional[RayHit]:
    o = np.asarray(origin, dtype=np.float64)
    d = _check_unit(direction)
    if brute_force:
        t, i = _bvh.nearest_brute(o, d, EPS_HIT, float(t_max), scene.v0, scene.e1, scene.e2)
    else:
        t, i = _bvh.nearest(o, d, EPS_HIT, float(t_max), *scene._kernel_args())
    if i < 0:
        return None
    return RayHit(float(t), o + t * d, int(i), scene.normals[i].copy(), int(scene.material_ids[i]))


def is_visible(scene: Scene, a, b) -> bool:
    a = np.asarray(a, dtype=np.float64).reshape(1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(1, 3)
    if np.array_equal(a, b):
        raise ValueError("visibility endpoints must differ")
    return bool(_bvh.segments_visible(a, b, EPS_HIT, *scene._kernel_args())[0])


def visible_batch(scene: Scene, a, b) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0:
        return np.zeros(0, dtype=bool)
    return _bvh.segments_visible(a, b, EPS_HIT, *scene._kernel_args())
