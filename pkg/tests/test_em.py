"""Tests for material constants, Fresnel, free-space, UTD and scattering models."""
import cmath
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from raybench.em import (
    CONCRETE,
    CarrierConfig,
    GeometryRejected,
    Material,
    complex_permittivity,
    diffraction_coefficient,
    fresnel_reflection,
    free_space_amplitude,
    gain_db,
    knife_edge_loss_db,
    load_materials,
    path_amplitude,
    reflect_field,
    scattering_coefficient,
    vertical_pol,
    write_materials,
)
from raybench.geometry import Scene
from raybench.scenes import building_triangles, equivalence_scenes, wall
from raybench.tracer import Interaction, PropagationPath, trace_image_method
from raybench.tracer.diffraction import diffraction_paths
from raybench.tracer.engine import fill_amplitudes

EPS0 = 8.8541878128e-12
F = 28e9
CARRIER = CarrierConfig(F)
LAM = CARRIER.wavelength


def fresnel_oracle(eta, theta, pol):
    """Snell-law form with explicit transmission angle."""
    n2 = cmath.sqrt(eta)
    sin_t = math.sin(theta) / n2
    cos_t = cmath.sqrt(1 - sin_t * sin_t)
    ci = math.cos(theta)
    if pol == "TE":
        return (ci - n2 * cos_t) / (ci + n2 * cos_t)
    return (n2 * ci - cos_t) / (n2 * ci + cos_t)


class TestMaterials:
    def test_concrete_at_28ghz(self):
        eta = complex_permittivity(CONCRETE, F)
        assert eta.real == 5.31
        assert eta.imag == pytest.approx(-0.4838 / (2 * math.pi * F * EPS0), rel=1e-12)
        assert eta.imag == pytest.approx(-0.3106, abs=5e-4)

    def test_lossless(self):
        assert complex_permittivity(Material("glass", 6.27, 0.0), F) == 6.27

    def test_imaginary_part_scales_inverse_frequency(self):
        a = complex_permittivity(CONCRETE, 28e9)
        b = complex_permittivity(CONCRETE, 56e9)
        assert b.imag == pytest.approx(a.imag / 2, rel=1e-14)

    def test_table_round_trip(self, tmp_path):
        mats = [CONCRETE, Material("glass", 6.27, 0.0)]
        write_materials(tmp_path / "m.ini", mats)
        table = load_materials(tmp_path / "m.ini")
        assert list(table) == ["concrete", "glass"]
        assert table["concrete"] == CONCRETE

    def test_missing_key(self, tmp_path):
        (tmp_path / "m.ini").write_text("[concrete]\neps_r = 5\n")
        with pytest.raises(ValueError, match="sigma"):
            load_materials(tmp_path / "m.ini")

    def test_carrier_range(self):
        with pytest.raises(ValueError):
            CarrierConfig(200e9)


class TestFresnel:
    eta = complex_permittivity(CONCRETE, F)

    def test_normal_incidence_magnitude(self):
        root = cmath.sqrt(self.eta)
        oracle = abs((1 - root) / (1 + root))
        for pol in ("TE", "TM"):
            g = abs(fresnel_reflection(self.eta, 1.0, pol))
            assert g == pytest.approx(oracle, rel=1e-12)
            assert g == pytest.approx(0.395, abs=0.005)

    @pytest.mark.parametrize("pol", ["TE", "TM"])
    def test_grazing_is_total(self, pol):
        assert abs(fresnel_reflection(self.eta, 0.0, pol)) == pytest.approx(1.0, abs=1e-12)

    def test_conductor_limit(self):
        eta = complex(1e9, 0.0)
        assert fresnel_reflection(eta, 0.6, "TE") == pytest.approx(-1.0, abs=1e-3)
        assert fresnel_reflection(eta, 0.6, "TM") == pytest.approx(1.0, abs=1e-3)

    def test_sweep_matches_oracle(self):
        thetas = np.linspace(0.0, math.pi / 2 - 1e-6, 500)
        for pol in ("TE", "TM"):
            for th in thetas:
                got = fresnel_reflection(self.eta, math.cos(th), pol)
                ref = fresnel_oracle(self.eta, th, pol)
                assert abs(got - ref) <= 1e-12 * max(abs(ref), 1e-300)

    @settings(max_examples=200, deadline=None)
    @given(eps_r=st.floats(1.01, 80.0), sigma=st.floats(0.0, 10.0), cos_i=st.floats(0.0, 1.0))
    def test_passive(self, eps_r, sigma, cos_i):
        eta = complex_permittivity(Material("m", eps_r, sigma), F)
        for pol in ("TE", "TM"):
            assert abs(fresnel_reflection(eta, cos_i, pol)) <= 1.0 + 1e-12

    def test_bad_polarization(self):
        with pytest.raises(ValueError):
            fresnel_reflection(self.eta, 0.5, "XX")


class TestFreeSpace:
    def test_hundred_metres(self):
        oracle = -20 * math.log10(4 * math.pi * 100.0 / LAM)
        g = gain_db(free_space_amplitude(100.0, LAM))
        assert g == pytest.approx(oracle, abs=1e-9)
        assert g == pytest.approx(-101.39, abs=0.01)

    def test_unit_gain_distance(self):
        assert gain_db(free_space_amplitude(LAM / (4 * math.pi), LAM)) == pytest.approx(0.0, abs=1e-12)

    def test_doubling(self):
        a = gain_db(free_space_amplitude(37.0, LAM))
        b = gain_db(free_space_amplitude(74.0, LAM))
        assert a - b == pytest.approx(20 * math.log10(2), abs=1e-12)

    def test_rejects_zero_length(self):
        with pytest.raises(ValueError):
            free_space_amplitude(0.0, LAM)


@pytest.fixture(scope="module")
def wall_scene():
    return Scene(wall(-50, 0, 50, 0, 30), [0, 0], [CONCRETE])


class TestPathAmplitude:
    def test_los(self, wall_scene):
        p = PropagationPath(np.array([0.0, -100.0, 2.0]), np.array([0.0, -200.0, 2.0]))
        a = path_amplitude(p, wall_scene, CARRIER)
        assert a.gain_db == pytest.approx(gain_db(free_space_amplitude(100.0, LAM)), abs=1e-9)

    def test_normal_incidence_reflection(self, wall_scene):
        sid = int(wall_scene.triangle_surface[0])
        tx = np.array([0.0, -60.0, 10.0])
        rx = np.array([0.0, -40.0, 10.0])
        p = PropagationPath(tx, rx, (Interaction("R", np.array([0.0, 0.0, 10.0]), sid),))
        a = path_amplitude(p, wall_scene, CARRIER)
        root = cmath.sqrt(complex_permittivity(CONCRETE, F))
        oracle = gain_db(free_space_amplitude(100.0, LAM)) + 20 * math.log10(abs((1 - root) / (1 + root)))
        assert a.gain_db == pytest.approx(oracle, abs=1e-9)
        assert a.gain_db == pytest.approx(-109.45, abs=0.02)

    def test_delay_matches_length(self):
        name, sc, tx, rx = equivalence_scenes()[3]
        for p in fill_amplitudes(trace_image_method(sc, tx, rx, 3), sc, CARRIER):
            assert p.amplitude.delay * 299_792_458.0 == pytest.approx(p.total_length, abs=1e-9)

    def test_passivity_and_reciprocity(self):
        for name, sc, tx, rx in equivalence_scenes():
            fwd = fill_amplitudes(trace_image_method(sc, tx, rx, 3), sc, CARRIER)
            assert fwd
            for p in fwd:
                los = abs(free_space_amplitude(p.total_length, LAM))
                assert abs(p.amplitude.amplitude) <= los * (1 + 1e-12)
                back = PropagationPath(rx, tx, tuple(reversed(p.interactions)))
                b = path_amplitude(back, sc, CARRIER)
                assert abs(b.amplitude) == pytest.approx(abs(p.amplitude.amplitude), rel=1e-9)

    def test_field_norm_never_grows_along_chain(self):
        name, sc, tx, rx = equivalence_scenes()[0]
        eta = complex_permittivity(CONCRETE, F)
        for p in trace_image_method(sc, tx, rx, 3):
            pts = p.points
            d = np.diff(pts, axis=0)
            d /= np.linalg.norm(d, axis=1)[:, None]
            E = vertical_pol(d[0]).astype(complex)
            prev = np.linalg.norm(E)
            for i, it in enumerate(p.interactions):
                E = reflect_field(E, d[i], d[i + 1], sc.surfaces[it.ref].normal, eta)
                cur = np.linalg.norm(E)
                assert cur <= prev * (1 + 1e-12)
                prev = cur


def _edge_point(edge, origin, phi, r):
    return origin + r * (math.cos(phi) * edge.tangent_a + math.sin(phi) * edge.normal_a)


@pytest.fixture(scope="module")
def corner():
    sc = Scene(building_triangles(0, 0, 10, 10, 20), [0] * 10, [CONCRETE])
    edge = next(e for e in sc.edges if abs(e.direction[2]) > 0.99)
    return sc, edge


class TestDiffraction:
    def _coef(self, edge, phi_p, phi, r=10.0):
        mid = 0.5 * (edge.p0 + edge.p1)
        src = _edge_point(edge, mid, phi_p, r)
        obs = _edge_point(edge, mid, phi, r)
        eta = complex_permittivity(CONCRETE, F)
        soft, hard, spread = diffraction_coefficient(edge, mid, src, obs, eta, LAM)
        return soft, hard

    def test_exterior_wedge_angle(self, corner):
        _, edge = corner
        assert edge.interior_angle == pytest.approx(math.pi / 2)
        assert edge.n == pytest.approx(1.5)

    def test_deep_shadow_weaker_than_transition(self, corner):
        _, edge = corner
        n = edge.n
        phi_p = 0.3 * math.pi
        boundary = math.pi + phi_p
        near = self._coef(edge, phi_p, boundary + 0.05)
        deep = self._coef(edge, phi_p, n * math.pi - 0.05)
        assert abs(deep[0]) < abs(near[0])
        assert abs(deep[1]) < abs(near[1])

    def test_bisector_symmetry(self, corner):
        # the mirrored geometry swaps the roles of source and observer
        _, edge = corner
        n = edge.n
        phi_p, phi = 0.4, 3.9
        a = self._coef(edge, phi_p, phi)
        b = self._coef(edge, n * math.pi - phi, n * math.pi - phi_p)
        assert a[0] == pytest.approx(b[0], rel=1e-9)
        assert a[1] == pytest.approx(b[1], rel=1e-9)

    def test_inside_wedge_rejected(self, corner):
        _, edge = corner
        with pytest.raises(GeometryRejected):
            self._coef(edge, 0.3, 1.5 * math.pi + 0.5)

    @pytest.mark.parametrize("h", [1.0, 2.0, 5.0, 10.0, 18.0])
    def test_knife_edge_within_3db(self, h):
        sc = Scene(wall(-200, 0, 200, 0, 20), [0, 0], [CONCRETE])
        tx = np.array([0.0, -50.0, 20.0 - h])
        rx = np.array([0.0, 60.0, 20.0 - h])
        paths = fill_amplitudes(diffraction_paths(sc, tx, rx), sc, CARRIER)
        top = [p for p in paths if p.points[1][2] == pytest.approx(20.0)]
        assert len(top) == 1
        p = top[0]
        d1 = np.linalg.norm(p.points[1] - tx)
        d2 = np.linalg.norm(rx - p.points[1])
        nu = h * math.sqrt(2 * (d1 + d2) / (LAM * d1 * d2))
        ref = gain_db(free_space_amplitude(float(np.linalg.norm(rx - tx)), LAM)) - knife_edge_loss_db(nu)
        assert abs(p.amplitude.gain_db - ref) <= 3.0

    def test_knife_edge_loss_reference_points(self):
        assert knife_edge_loss_db(-1.0) == 0.0
        assert knife_edge_loss_db(0.0) == pytest.approx(6.0, abs=0.05)


class TestScattering:
    def test_zero_roughness(self):
        assert scattering_coefficient(0.0, 0.7, 0.4) == 0.0

    def test_lambertian_ratio(self):
        a = scattering_coefficient(0.3, 0.8, 1.0)
        b = scattering_coefficient(0.3, 0.8, math.cos(math.radians(60)))
        assert a / b == pytest.approx(math.sqrt(2.0), rel=1e-12)

    @pytest.mark.parametrize("cos_i", [1.0, 0.5, 0.1])
    def test_hemisphere_power(self, cos_i):
        S = 0.3
        nt = 2000
        th = (np.arange(nt) + 0.5) * (math.pi / 2) / nt
        w = np.sin(th) * (math.pi / 2) / nt * 2 * math.pi
        c2 = np.array([scattering_coefficient(S, cos_i, math.cos(t)) ** 2 for t in th])
        total = float((c2 * w).sum())
        assert total <= S ** 2 * (1 + 1e-6)
        assert total == pytest.approx(S ** 2 * cos_i, rel=1e-5)

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            scattering_coefficient(1.5, 1.0, 1.0)
