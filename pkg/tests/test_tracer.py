"""Tests for direction sets, the image method, SBR, diffraction and scattering."""
import io
import itertools
import json
import math
import time

import numpy as np
import pytest
from scipy.spatial.distance import pdist

from raybench.em import CONCRETE, CarrierConfig, path_amplitude
from raybench.geometry import Scene, is_visible
from raybench.scenes import (
    box_room,
    building_triangles,
    city_positions,
    city_scene,
    equivalence_scenes,
    parallel_walls,
    two_occlusion_scene,
    wall,
)
from raybench.tracer import (
    Interaction,
    PropagationPath,
    TraceParams,
    TraceStats,
    UnsupportedDepthError,
    correct_path,
    diffraction_paths,
    fermat_points,
    fibonacci_directions,
    grid_directions,
    launch_sbr,
    merge_paths,
    trace,
    trace_image_method,
)
from raybench.tracer.directions import effective_spacing
from raybench.tracer.engine import path_record, write_path_dump

CARRIER = CarrierConfig()


def sigset(paths):
    return {p.signature for p in paths}


def pairwise_angles(d):
    return 2.0 * np.arcsin(np.clip(pdist(d) / 2.0, 0.0, 1.0))


@pytest.fixture(scope="module")
def ground():
    return Scene.ground_only(-100, 100, -100, 100)


class TestDirections:
    def test_single_sample(self):
        assert fibonacci_directions(1).tolist() == [[0.0, 0.0, 1.0]]

    def test_thousand_sample_spacing(self):
        d = fibonacci_directions(1000)
        dots = np.clip(d @ d.T, -1.0, 1.0)
        np.fill_diagonal(dots, -1.0)
        nn = np.arccos(dots.max(axis=1))
        target = math.sqrt(4 * math.pi / 1000)
        assert 0.8 * target <= nn.mean() <= 1.2 * target
        assert effective_spacing(d) == pytest.approx(nn.mean(), rel=1e-9)

    def test_large_lattice_is_unit(self):
        d = fibonacci_directions(160_000)
        assert d.shape == (160_000, 3)
        assert np.abs(np.linalg.norm(d, axis=1) - 1.0).max() <= 1e-12

    def test_half_degree_grid_size(self):
        n = len(grid_directions(0.5))
        expected = 4 * math.pi / math.radians(0.5) ** 2
        assert abs(n - expected) / expected < 0.01

    def test_coarse_grid_spans_all_signs(self):
        d = grid_directions(90.0)
        assert len(d) >= 4
        for axis in range(3):
            assert (d[:, axis] > 1e-9).any() and (d[:, axis] < -1e-9).any()

    @pytest.mark.parametrize("delta", [90.0, 45.0, 20.0, 10.0, 5.0, 3.0])
    def test_grid_min_separation(self, delta):
        d = grid_directions(delta)
        assert np.abs(np.linalg.norm(d, axis=1) - 1).max() < 1e-12
        assert pairwise_angles(d).min() >= 0.5 * math.radians(delta) - 1e-12

    def test_hemisphere_grid_is_upper(self):
        d = grid_directions(10.0, hemisphere=True)
        assert (d[:, 2] > 0).all()


class TestImageMethod:
    def test_single_ground_bounce(self, ground):
        tx, rx = np.array([0.0, 0.0, 7.0]), np.array([10.0, 0.0, 1.5])
        paths = trace_image_method(ground, tx, rx, 1)
        assert len(paths) == 2
        los = next(p for p in paths if p.is_los)
        assert los.total_length == pytest.approx(math.hypot(10.0, 5.5), abs=1e-12)
        bounce = next(p for p in paths if not p.is_los)
        assert np.allclose(bounce.interactions[0].point, (10 * 7 / 8.5, 0.0, 0.0), atol=1e-12)

    def test_parallel_walls_match_enumeration(self):
        sc = parallel_walls()
        tx, rx = np.array([3.0, 4.0, 2.0]), np.array([15.0, 6.0, 1.5])
        got = {p.signature: p for p in trace_image_method(sc, tx, rx, 2)}
        # brute force: every sequence of length <= 2, solved with explicit images
        expected = set()
        if is_visible(sc, tx, rx):
            expected.add(())
        surfaces = sc.surfaces
        for k in (1, 2):
            for seq in itertools.product(range(len(surfaces)), repeat=k):
                if any(a == b for a, b in zip(seq, seq[1:])):
                    continue
                pts = _solve_by_images(sc, seq, tx, rx)
                if pts is not None:
                    expected.add(tuple(("R", s) for s in seq))
        assert set(got) == expected
        assert len(expected) > 3

    def test_occluded_receiver_depth_zero(self):
        sc = Scene(building_triangles(0, 0, 10, 10, 20), [0] * 10, [CONCRETE])
        assert trace_image_method(sc, (-5.0, 5.0, 2.0), (15.0, 5.0, 2.0), 0) == []

    @pytest.mark.parametrize("K,expected", [(1, 6), (2, 36), (3, 186)])
    def test_candidate_count_without_pruning(self, K, expected):
        sc = box_room()
        n = sc.n_surfaces
        assert n == 6
        assert sum(n * (n - 1) ** (k - 1) for k in range(1, K + 1)) == expected
        st = TraceStats()
        trace_image_method(sc, (2.0, 3.0, 2.0), (7.5, 5.0, 1.2), K, prune=False, stats=st)
        assert st.candidates == expected

    def test_pruning_keeps_paths(self):
        for name, sc, tx, rx in equivalence_scenes():
            a = sigset(trace_image_method(sc, tx, rx, 3))
            b = sigset(trace_image_method(sc, tx, rx, 3, prune=False))
            assert a == b, name

    def test_depth_cap(self, ground):
        with pytest.raises(UnsupportedDepthError, match="SBR"):
            trace_image_method(ground, (0, 0, 5), (5, 0, 5), 4)

    def test_mirror_law(self):
        for name, sc, tx, rx in equivalence_scenes():
            for p in trace_image_method(sc, tx, rx, 3):
                pts = p.points
                for i, it in enumerate(p.interactions):
                    n = sc.surfaces[it.ref].normal
                    a = pts[i] - pts[i + 1]
                    b = pts[i + 2] - pts[i + 1]
                    a /= np.linalg.norm(a)
                    b /= np.linalg.norm(b)
                    ia = math.acos(min(1.0, abs(a @ n)))
                    ib = math.acos(min(1.0, abs(b @ n)))
                    assert abs(ia - ib) < 1e-6
                    # outgoing lies in the plane of incidence
                    assert abs(np.cross(a, n) @ b) < 1e-6

    def test_depth_monotone(self):
        for name, sc, tx, rx in equivalence_scenes():
            prev = set()
            for K in range(0, 4):
                cur = sigset(trace_image_method(sc, tx, rx, K))
                assert prev <= cur
                prev = cur


def _solve_by_images(scene, seq, tx, rx):
    """Independent mirror-image solver used as an oracle."""
    imgs = [np.asarray(tx, float)]
    for s in seq:
        n, off = scene.surfaces[s].normal, scene.surfaces[s].offset
        p = imgs[-1]
        imgs.append(p - 2 * (p @ n - off) * n)
    pts = []
    target = np.asarray(rx, float)
    for j in range(len(seq) - 1, -1, -1):
        s = seq[j]
        n, off = scene.surfaces[s].normal, scene.surfaces[s].offset
        a, b = imgs[j + 1], target
        da, db = a @ n - off, b @ n - off
        if da * db >= 0:
            return None
        x = a + (b - a) * (da / (da - db))
        if not _on_surface(scene, s, x):
            return None
        pts.append(x)
        target = x
    pts = pts[::-1]
    chain = [np.asarray(tx, float)] + pts + [np.asarray(rx, float)]
    for u, v in zip(chain, chain[1:]):
        if not is_visible(scene, u, v):
            return None
    return pts


def _on_surface(scene, s, x):
    for t in scene.surfaces[s].triangles:
        v0, e1, e2 = scene.v0[t], scene.e1[t], scene.e2[t]
        w = x - v0
        d00, d01, d11 = e1 @ e1, e1 @ e2, e2 @ e2
        d20, d21 = w @ e1, w @ e2
        den = d00 * d11 - d01 * d01
        v = (d11 * d20 - d01 * d21) / den
        u = (d00 * d21 - d01 * d20) / den
        if v >= -1e-9 and u >= -1e-9 and u + v <= 1 + 1e-9:
            return True
    return False


class TestCorrectPath:
    def test_single_bounce_closed_form(self, ground):
        sid = int(ground.triangle_surface[0])
        p = correct_path(ground, [("R", sid)], (0.0, 0.0, 7.0), (10.0, 0.0, 1.5))
        assert np.allclose(p.interactions[0].point, (10 * 7 / 8.5, 0, 0), atol=1e-12)

    def test_point_outside_face(self):
        sc = Scene(wall(-1, 0, 1, 0, 3), [0, 0], [CONCRETE])
        sid = int(sc.triangle_surface[0])
        assert correct_path(sc, [sid], (20.0, -5.0, 1.5), (30.0, -5.0, 1.5)) is None

    def test_random_two_bounce_signatures(self):
        sc = box_room()
        tx, rx = np.array([2.0, 3.0, 2.0]), np.array([7.5, 5.0, 1.2])
        full = sigset(trace_image_method(sc, tx, rx, 2))
        rng = np.random.default_rng(11)
        for _ in range(100):
            a, b = rng.choice(6, size=2, replace=False)
            sig = (("R", int(a)), ("R", int(b)))
            p = correct_path(sc, sig, tx, rx)
            assert (p is not None) == (sig in full)


class TestSBR:
    def test_ground_bounce_matches_image(self, ground):
        tx, rx = np.array([0.0, 0.0, 7.0]), np.array([10.0, 0.0, 1.5])
        ref = {p.signature: p for p in trace_image_method(ground, tx, rx, 1)}
        got = {p.signature: p for p in launch_sbr(ground, tx, [rx], TraceParams(max_reflections=1,
                                                                              num_samples=100_000))[0]}
        assert set(got) == set(ref)
        for s in ref:
            assert got[s].total_length == pytest.approx(ref[s].total_length, abs=1e-6)

    def test_depth_zero_is_los(self, ground):
        res = launch_sbr(ground, (0, 0, 7), [(10, 0, 1.5)], TraceParams(max_reflections=0, num_samples=1000))
        assert [p.is_los for p in res[0]] == [True]

    def test_sparse_launch_no_error(self):
        sc = city_scene()
        res = launch_sbr(sc, (90.0, 40.0, 7.0), [(340.0, 330.0, 1.5)], TraceParams(max_reflections=3, num_samples=10))
        assert isinstance(res[0], list)

    def test_equivalence_small_scenes(self):
        for name, sc, tx, rx in equivalence_scenes():
            ref = {p.signature: p for p in trace_image_method(sc, tx, rx, 3)}
            got = {p.signature: p for p in launch_sbr(sc, tx, [rx], TraceParams(max_reflections=3,
                                                                              num_samples=100_000))[0]}
            assert set(got) == set(ref), name
            for s in ref:
                assert got[s].total_length == pytest.approx(ref[s].total_length, abs=1e-6)

    @pytest.mark.parametrize("depth", [0, 1, 3, 6])
    def test_segment_bound(self, depth):
        sc = city_scene()
        st = TraceStats()
        tx, rx = city_positions()
        launch_sbr(sc, tx[0], rx, TraceParams(max_reflections=depth, num_samples=5000), stats=st)
        assert st.rays == 5000
        assert st.segments <= st.rays * (depth + 1)

    def test_worker_count_does_not_change_result(self):
        sc = city_scene()
        tx, rx = city_positions()
        p = TraceParams(max_reflections=3, num_samples=70_000)
        a = launch_sbr(sc, tx[1], rx, p, workers=1)
        b = launch_sbr(sc, tx[1], rx, p, workers=3)
        for q in a:
            assert [x.key for x in a[q]] == [x.key for x in b[q]]
            for x, y in zip(a[q], b[q]):
                assert np.array_equal(x.points, y.points)

    def test_angular_separation_launch(self, ground):
        res = launch_sbr(ground, (0, 0, 7), [(10, 0, 1.5)], TraceParams(max_reflections=1, angular_separation=0.5))
        assert len(res[0]) == 2


class TestDiffractionPaths:
    def test_knife_edge_point_is_length_minimum(self):
        sc = Scene(wall(-30, 0, 30, 0, 12), [0, 0], [CONCRETE])
        tx, rx = np.array([-4.0, -20.0, 2.0]), np.array([9.0, 25.0, 1.5])
        paths = diffraction_paths(sc, tx, rx)
        top = [p for p in paths if abs(p.interactions[0].point[2] - 12.0) < 1e-9]
        assert len(top) == 1
        edge = sc.edges[top[0].interactions[0].ref]
        t = np.linspace(0.0, 1.0, 10_000)
        pts = edge.p0 + t[:, None] * (edge.p1 - edge.p0)
        lengths = np.linalg.norm(pts - tx, axis=1) + np.linalg.norm(pts - rx, axis=1)
        best = pts[np.argmin(lengths)]
        spacing = np.linalg.norm(edge.p1 - edge.p0) / 9999
        assert np.linalg.norm(top[0].interactions[0].point - best) <= spacing
        assert top[0].total_length <= lengths.min() + 1e-9

    def test_fermat_against_grid(self):
        rng = np.random.default_rng(5)
        A = rng.uniform(-10, 10, (50, 3))
        B = rng.uniform(-10, 10, (50, 3))
        p0 = rng.uniform(-10, 10, (50, 3))
        p1 = rng.uniform(-10, 10, (50, 3))
        t = fermat_points(A, B, p0, p1)
        g = np.linspace(0, 1, 200_001)
        for i in range(50):
            P = p0[i] + g[:, None] * (p1[i] - p0[i])
            L = np.linalg.norm(P - A[i], axis=1) + np.linalg.norm(P - B[i], axis=1)
            Pt = p0[i] + t[i] * (p1[i] - p0[i])
            Lt = np.linalg.norm(Pt - A[i]) + np.linalg.norm(Pt - B[i])
            # t is resolved to 1e-9, so the length is within that times |dL/dt| <= 2 |seg|
            assert Lt <= L.min() + 2e-9 * np.linalg.norm(p1[i] - p0[i]) + 1e-12

    def test_same_side_with_los(self):
        sc = Scene(building_triangles(0, 0, 10, 10, 20), [0] * 10, [CONCRETE])
        paths = diffraction_paths(sc, (-5.0, -5.0, 2.0), (15.0, -6.0, 2.0))
        assert paths

    def test_keller_cone_holds(self):
        sc = Scene(building_triangles(0, 0, 10, 10, 20), [0] * 10, [CONCRETE])
        for p in diffraction_paths(sc, (-5.0, -7.0, 2.0), (15.0, 18.0, 9.0)):
            e = sc.edges[p.interactions[0].ref].direction
            pts = p.points
            ki = (pts[1] - pts[0]) / np.linalg.norm(pts[1] - pts[0])
            ko = (pts[2] - pts[1]) / np.linalg.norm(pts[2] - pts[1])
            assert abs(ki @ e - ko @ e) < 1e-6

    def test_combine_flag(self):
        sc, tx, rx = two_occlusion_scene()
        assert diffraction_paths(sc, tx, rx) == []
        combined = diffraction_paths(sc, tx, rx, combine_with_reflections=True, max_reflections=1)
        assert combined
        assert all(p.count("R") >= 1 and p.count("D") == 1 for p in combined)


class TestScattering:
    def test_single_spawn_one_per_wall_hit(self):
        sc = Scene(wall(-10, 0, 10, 0, 8), [0, 0], [CONCRETE], ground=False)
        tx, rx = np.array([0.0, -6.0, 3.0]), np.array([4.0, -3.0, 2.0])
        ns = 20_000
        res = trace(sc, tx, [rx], TraceParams(max_reflections=1, num_samples=ns, scattering=True,
                                              diffraction_depth=0))
        scat = [p for p in res[0] if p.count("S")]
        d = fibonacci_directions(ns)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = -tx[1] / d[:, 1]
            hit = tx + t[:, None] * d
        on_wall = (t > 0) & (np.abs(hit[:, 0]) <= 10) & (hit[:, 2] >= 0) & (hit[:, 2] <= 8)
        assert len(scat) == int(on_wall.sum())
        assert all(len(p.interactions) == 1 for p in scat)

    def test_reemission_superset_and_slower(self):
        sc = Scene(wall(-10, 0, 10, 0, 8) + wall(-10, 12, 10, 12, 8), [0] * 4, [CONCRETE])
        tx, rx = np.array([0.0, 6.0, 3.0]), np.array([4.0, 3.0, 2.0])
        base = TraceParams(max_reflections=2, num_samples=20_000, scattering=True, diffraction_depth=0)
        trace(sc, tx, [rx], base)
        trace(sc, tx, [rx], TraceParams(**{**base.as_dict(), "scatter_mode": "reemit"}))
        t0 = time.perf_counter()
        single = trace(sc, tx, [rx], base)[0]
        t1 = time.perf_counter()
        re = trace(sc, tx, [rx], TraceParams(**{**base.as_dict(), "scatter_mode": "reemit"}))[0]
        t2 = time.perf_counter()
        assert len(re) > len(single)
        assert {p.key for p in single} <= {p.key for p in re}
        assert t2 - t1 > t1 - t0

    def test_bulk_amplitudes_match_replay(self):
        sc = city_scene()
        tx, rx = city_positions()
        res = trace(sc, tx[0], rx[:3], TraceParams(max_reflections=2, num_samples=5000, scattering=True))
        n = 0
        for q in res:
            for p in res[q]:
                if p.count("S"):
                    ref = path_amplitude(p, sc, CARRIER).amplitude
                    # phase is k * L with k ~ 590 rad/m, so length rounding dominates
                    assert abs(p.amplitude.amplitude - ref) <= 1e-9 * abs(ref)
                    n += 1
        assert n > 0

    def test_scattering_needs_sbr(self):
        with pytest.raises(ValueError, match="SBR"):
            TraceParams(method="image", scattering=True).validate()


class TestEngine:
    def test_ground_only_pair(self, ground):
        res = trace(ground, (0, 0, 7), [(30, 5, 1.5)], TraceParams(max_reflections=3, num_samples=10_000))
        assert sorted(len(p.interactions) for p in res[0]) == [0, 1]

    def test_repeat_is_identical(self):
        sc = city_scene()
        tx, rx = city_positions()
        p = TraceParams(max_reflections=3, num_samples=20_000, scattering=True)
        a = trace(sc, tx[2], rx[:10], p)
        b = trace(sc, tx[2], rx[:10], p)
        for q in a:
            ra = [json.dumps(path_record(x), sort_keys=True) for x in a[q]]
            rb = [json.dumps(path_record(x), sort_keys=True) for x in b[q]]
            assert ra == rb

    def test_city_pair_has_paths(self):
        sc = city_scene()
        tx, rx = city_positions()
        res = trace(sc, tx[0], rx[:1], TraceParams(max_reflections=3, num_samples=160_000))
        assert len(res[0]) >= 1

    def test_image_and_sbr_gains_agree(self):
        for name, sc, tx, rx in equivalence_scenes():
            a = trace(sc, tx, [rx], TraceParams(method="image", max_reflections=3, diffraction_depth=0))[0]
            b = trace(sc, tx, [rx], TraceParams(max_reflections=3, num_samples=100_000, diffraction_depth=0))[0]
            ga = {p.signature: p.amplitude.gain_db for p in a}
            gb = {p.signature: p.amplitude.gain_db for p in b}
            assert set(ga) == set(gb)
            for s in ga:
                assert gb[s] == pytest.approx(ga[s], abs=1e-6)

    def test_joint_depth_counts_all_interactions(self):
        sc = city_scene()
        tx, rx = city_positions()
        p = TraceParams(max_reflections=3, max_depth=1, depth_mode="joint", num_samples=20_000)
        res = trace(sc, tx[0], rx[:10], p)
        assert all(len(x.interactions) <= 1 for q in res for x in res[q])
        assert any(x.count("D") for q in res for x in res[q])

    def test_merge_is_idempotent(self):
        name, sc, tx, rx = equivalence_scenes()[0]
        paths = trace_image_method(sc, tx, rx, 3)
        once = merge_paths(paths)
        assert [p.key for p in merge_paths(once, once)] == [p.key for p in once]

    def test_path_dump_format(self):
        name, sc, tx, rx = equivalence_scenes()[1]
        res = trace(sc, tx, [rx], TraceParams(method="image", max_reflections=2))
        buf = io.StringIO()
        write_path_dump(buf, {"engine": "x"}, (path_record(p, "T0", "R0") for p in res[0]))
        lines = [json.loads(x) for x in buf.getvalue().splitlines()]
        assert lines[0] == {"header": {"engine": "x"}}
        rec = lines[1]
        assert set(rec) >= {"signature", "points", "length", "delay", "gain_db", "tx", "rx"}
        assert len(lines) == len(res[0]) + 1


class TestTraceParams:
    def test_sampling_exclusive(self):
        probs = TraceParams(num_samples=10, angular_separation=1.0).problems()
        assert len(probs) == 1 and "exactly one" in probs[0]

    def test_sbr_needs_sampling(self):
        assert TraceParams().problems()

    def test_image_depth_cap(self):
        assert TraceParams(method="image", max_reflections=4).problems()

    def test_with_depth(self):
        p = TraceParams(num_samples=10, depth_mode="joint", max_depth=2).with_depth(5)
        assert p.max_depth == 5 and p.reflection_budget == 5
        q = TraceParams(num_samples=10).with_depth(7)
        assert q.max_reflections == 7

    def test_interaction_is_frozen(self):
        it = Interaction("R", np.zeros(3), 0)
        with pytest.raises(Exception):
            it.kind = "D"
        assert PropagationPath(np.zeros(3), np.ones(3), (it,)).signature == (("R", 0),)
