"""Electromagnetic bookkeeping: materials, interaction coefficients, path amplitudes.

Conventions
-----------
* Time dependence ``exp(+j w t)``; a path of length ``L`` carries ``exp(-j k L)``.
* Amplitudes are field gains relative to isotropic unit-gain antennas, so the
  line-of-sight amplitude is ``lambda / (4 pi L)`` and ``gain_db = 10 log10 |a|^2``.
* Both ends use the vertical ("theta-hat") polarization of the local ray
  direction. Reflections split the field into TE/TM components.
"""
from __future__ import annotations

import cmath
import configparser
import math
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
from scipy import special

SPEED_OF_LIGHT = 299_792_458.0
EPS0 = 8.8541878128e-12

KELLER_TOL = 1e-6
KNIFE_EDGE_ANGLE = 1e-6


class GeometryRejected(ValueError):
    """Raised when an interaction geometry is not a valid propagation event."""


@dataclass(frozen=True)
class Material:
    name: str
    eps_r: float
    sigma: float

    def __post_init__(self):
        if not self.eps_r >= 1.0:
            raise ValueError(f"material {self.name!r}: eps_r must be >= 1, got {self.eps_r}")
        if not self.sigma >= 0.0:
            raise ValueError(f"material {self.name!r}: sigma must be >= 0, got {self.sigma}")


CONCRETE = Material("concrete", 5.31, 0.4838)


@dataclass(frozen=True)
class CarrierConfig:
    frequency: float = 28e9

    def __post_init__(self):
        if not 0.1e9 <= self.frequency <= 100e9:
            raise ValueError(f"carrier frequency {self.frequency} Hz outside 0.1-100 GHz")

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.frequency

    @property
    def wavenumber(self) -> float:
        return 2.0 * math.pi / self.wavelength


def load_materials(path) -> dict[str, Material]:
    """Read a material table.

    One section per material::

        [concrete]
        eps_r = 5.31
        sigma = 0.4838
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    path = Path(path)
    with open(path) as fh:
        cp.read_file(fh)
    table = {}
    for name in cp.sections():
        sec = cp[name]
        try:
            table[name] = Material(name, float(sec["eps_r"]), float(sec["sigma"]))
        except KeyError as exc:
            raise ValueError(f"{path}: material [{name}] missing key {exc}") from None
    if not table:
        raise ValueError(f"{path}: no materials defined")
    return table


def write_materials(path, materials) -> None:
    with open(path, "w") as fh:
        for m in materials:
            fh.write(f"[{m.name}]\neps_r = {float(m.eps_r)!r}\nsigma = {float(m.sigma)!r}\n\n")


def complex_permittivity(material: Material, f: float) -> complex:
    if f <= 0:
        raise ValueError("frequency must be positive")
    return complex(material.eps_r, -material.sigma / (2.0 * math.pi * f * EPS0))


@numba.njit(cache=True, nogil=True)
def _fresnel(eta, cos_i):
    sin2 = 1.0 - cos_i * cos_i
    root = np.sqrt(eta - sin2 + 0j)
    te = (cos_i - root) / (cos_i + root)
    tm = (eta * cos_i - root) / (eta * cos_i + root)
    return te, tm


def fresnel_reflection(eta: complex, cos_theta_i: float, polarization: str) -> complex:
    """Reflection coefficient of a half-space with relative permittivity ``eta``.

    ``polarization`` is ``"TE"`` (E perpendicular to the plane of incidence)
    or ``"TM"``. The TM coefficient is referenced to the in-plane field
    components, so a perfect conductor gives TE -> -1 and TM -> +1.
    """
    if not -1e-12 <= cos_theta_i <= 1.0 + 1e-12:
        raise ValueError(f"cos_theta_i must lie in [0, 1], got {cos_theta_i}")
    cos_theta_i = min(max(cos_theta_i, 0.0), 1.0)
    te, tm = _fresnel(complex(eta), cos_theta_i)
    pol = polarization.upper()
    if pol == "TE":
        return complex(te)
    if pol == "TM":
        return complex(tm)
    raise ValueError(f"unknown polarization {polarization!r}")


def free_space_amplitude(length: float, wavelength: float) -> complex:
    if length <= 0:
        raise ValueError(f"path length must be positive, got {length}")
    return wavelength / (4.0 * math.pi * length) * cmath.exp(-2j * math.pi * length / wavelength)


def gain_db(amplitude: complex) -> float:
    p = abs(amplitude) ** 2
    return 10.0 * math.log10(p) if p > 0 else -math.inf


def scattering_coefficient(S: float, cos_theta_i: float, cos_theta_s: float) -> float:
    """Lambertian effective-roughness field weight ``S sqrt(cos_i cos_s / pi)``.

    Squared and integrated over the outgoing hemisphere this returns
    ``S**2 cos_i``: the scattered share of the power intercepted by the patch.
    """
    if not 0.0 <= S <= 1.0:
        raise ValueError(f"scattering coefficient S must be in [0, 1], got {S}")
    if cos_theta_s <= 0.0 or cos_theta_i <= 0.0:
        return 0.0
    return S * math.sqrt(cos_theta_i * cos_theta_s / math.pi)


# --------------------------------------------------------------------------
# diffraction


def _transition(x):
    """Kouyoumjian-Pathak transition function F(x), x >= 0."""
    x = np.asarray(x, dtype=float)
    sx = np.sqrt(x)
    fm = special.modfresnelm(sx)[0]
    return 2j * sx * np.exp(1j * x) * fm


def _a_pm(beta, n, sign):
    # N is the integer that most nearly satisfies 2 pi n N - beta = sign * pi
    N = np.round((beta + sign * math.pi) / (2.0 * math.pi * n))
    return 2.0 * np.cos((2.0 * n * math.pi * N - beta) / 2.0) ** 2


def _utd_term(k, n, L, beta, sign, sin_b0):
    arg = (math.pi + sign * beta) / (2.0 * n)
    s = math.sin(arg)
    if abs(s) < 1e-9:
        # removable singularity on a shadow/reflection boundary
        beta = beta + 1e-7
        arg = (math.pi + sign * beta) / (2.0 * n)
        s = math.sin(arg)
    cot = math.cos(arg) / s
    F = complex(_transition(k * L * _a_pm(beta, n, sign)))
    return -cmath.exp(-1j * math.pi / 4) / (2.0 * n * math.sqrt(2.0 * math.pi * k) * sin_b0) * cot * F


def utd_coefficients(k, n, phi, phi_p, beta0, L, r0_soft=-1.0, rn_soft=-1.0, r0_hard=1.0, rn_hard=1.0):
    """Soft and hard UTD wedge coefficients with face reflection weights.

    With the default weights this is the perfectly conducting wedge; passing
    Fresnel coefficients of the two faces gives the heuristic lossy form.
    """
    sin_b0 = math.sin(beta0)
    d1 = _utd_term(k, n, L, phi - phi_p, +1, sin_b0)
    d2 = _utd_term(k, n, L, phi - phi_p, -1, sin_b0)
    d3 = _utd_term(k, n, L, phi + phi_p, +1, sin_b0)
    d4 = _utd_term(k, n, L, phi + phi_p, -1, sin_b0)
    soft = d1 + d2 + rn_soft * d3 + r0_soft * d4
    hard = d1 + d2 + rn_hard * d3 + r0_hard * d4
    return soft, hard


def wedge_angles(edge, direction_out):
    """Angle from the 0-face (measured through the exterior) of a direction leaving the edge."""
    e = edge.direction
    v = direction_out - np.dot(direction_out, e) * e
    nv = np.linalg.norm(v)
    if nv < 1e-15:
        raise GeometryRejected("direction parallel to edge")
    v = v / nv
    phi = math.atan2(float(np.dot(v, edge.normal_a)), float(np.dot(v, edge.tangent_a)))
    if phi < 0.0:
        phi += 2.0 * math.pi
    return phi


def diffraction_coefficient(edge, point, source, observer, eta, wavelength, s_in=None, s_out=None):
    """Dyadic UTD coefficient at ``point`` on ``edge``.

    ``source``/``observer`` are the neighbouring path points (or their images
    for unfolded legs). ``s_in``/``s_out`` are the unfolded lengths used for the
    spreading; they default to the straight distances.

    Returns ``(soft, hard, spread)`` where ``spread`` converts the coefficient
    into a dimensionless factor on top of the free-space amplitude of the
    total unfolded length.
    """
    point = np.asarray(point, float)
    ki = point - np.asarray(source, float)
    ko = np.asarray(observer, float) - point
    sp = float(np.linalg.norm(ki)) if s_in is None else s_in
    so = float(np.linalg.norm(ko)) if s_out is None else s_out
    ki = ki / np.linalg.norm(ki)
    ko = ko / np.linalg.norm(ko)
    e = edge.direction
    cb_in = float(np.dot(ki, e))
    cb_out = float(np.dot(ko, e))
    if abs(cb_in - cb_out) > KELLER_TOL:
        raise GeometryRejected(f"off the Keller cone by {abs(cb_in - cb_out):.3g}")
    beta0 = math.acos(min(max(cb_in, -1.0), 1.0))
    if math.sin(beta0) < 1e-9:
        raise GeometryRejected("grazing along the edge")
    n = edge.n
    phi_p = wedge_angles(edge, -ki)
    phi = wedge_angles(edge, ko)
    tol = 1e-9
    if phi_p > n * math.pi + tol or phi > n * math.pi + tol:
        raise GeometryRejected("ray inside the wedge")
    phi_p = min(phi_p, n * math.pi)
    phi = min(phi, n * math.pi)
    k = 2.0 * math.pi / wavelength
    L = so * sp * math.sin(beta0) ** 2 / (so + sp)
    # face reflection weights at the local grazing angles
    sb = math.sin(beta0)
    r0s, r0h = _fresnel(complex(eta), min(abs(math.sin(phi_p)) * sb, 1.0))
    rns, rnh = _fresnel(complex(eta), min(abs(math.sin(n * math.pi - phi)) * sb, 1.0))
    soft, hard = utd_coefficients(k, n, phi, phi_p, beta0, L, r0s, rns, r0h, rnh)
    spread = math.sqrt((so + sp) / (so * sp))
    return soft, hard, spread


def knife_edge_loss_db(nu: float) -> float:
    """Single knife-edge diffraction loss J(nu) in dB (positive = loss)."""
    if nu <= -0.78:
        return 0.0
    return 6.9 + 20.0 * math.log10(math.sqrt((nu - 0.1) ** 2 + 1.0) + nu - 0.1)


# --------------------------------------------------------------------------
# path amplitude


@dataclass(frozen=True)
class PathAmplitude:
    amplitude: complex
    delay: float

    @property
    def gain_db(self) -> float:
        return gain_db(self.amplitude)


@numba.njit(cache=True, nogil=True, inline="always")
def _cross(a, b):
    return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])


@numba.njit(cache=True, nogil=True)
def vertical_pol(k):
    """Unit vector of the vertical polarization transverse to ``k``."""
    kz = k[2]
    v = np.array([-kz * k[0], -kz * k[1], 1.0 - kz * kz])
    n = np.sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
    if n < 1e-12:
        v = np.array([1.0 - k[0] * k[0], -k[0] * k[1], -k[0] * k[2]])
        n = np.sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
    return v / n


@numba.njit(cache=True, nogil=True)
def reflect_field(E, k_in, k_out, normal, eta):
    """Apply TE/TM Fresnel reflection to the complex field vector ``E``."""
    c = k_in[0] * normal[0] + k_in[1] * normal[1] + k_in[2] * normal[2]
    cos_i = min(abs(c), 1.0)
    s = _cross(k_in, normal)
    ns = np.sqrt(s[0] * s[0] + s[1] * s[1] + s[2] * s[2])
    if ns < 1e-12:
        # normal incidence: plane of incidence undefined, any transverse axis works
        s = _cross(k_in, np.array([0.0, 0.0, 1.0]))
        ns = np.sqrt(s[0] * s[0] + s[1] * s[1] + s[2] * s[2])
        if ns < 1e-12:
            s = _cross(k_in, np.array([1.0, 0.0, 0.0]))
            ns = np.sqrt(s[0] * s[0] + s[1] * s[1] + s[2] * s[2])
    s = s / ns
    p_in = _cross(s, k_in)
    p_out = _cross(s, k_out)
    te, tm = _fresnel(eta, cos_i)
    es = E[0] * s[0] + E[1] * s[1] + E[2] * s[2]
    ep = E[0] * p_in[0] + E[1] * p_in[1] + E[2] * p_in[2]
    return te * es * s + tm * ep * p_out


def _diffract_field(E, edge, point, prev_pt, next_pt, s_in, s_out, eta, wavelength):
    soft, hard, spread = diffraction_coefficient(
        edge, point, prev_pt, next_pt, eta, wavelength, s_in=s_in, s_out=s_out
    )
    ki = point - prev_pt
    ki = ki / np.linalg.norm(ki)
    ko = next_pt - point
    ko = ko / np.linalg.norm(ko)
    e = edge.direction
    phi_i = np.cross(e, ki)
    phi_i /= np.linalg.norm(phi_i)
    beta_i = np.cross(phi_i, ki)
    phi_o = np.cross(e, ko)
    phi_o /= np.linalg.norm(phi_o)
    beta_o = np.cross(phi_o, ko)
    return -spread * (soft * np.dot(E, beta_i) * beta_o + hard * np.dot(E, phi_i) * phi_o)


def path_amplitude(path, scene, carrier: CarrierConfig) -> PathAmplitude:
    """Complex field gain of a propagation path.

    The free-space term of the total unfolded length is multiplied by the
    polarimetric interaction chain and projected on the receive polarization.
    """
    pts = path.points
    seg = np.diff(pts, axis=0)
    lens = np.linalg.norm(seg, axis=1)
    if np.any(lens <= 0):
        raise ValueError("degenerate path segment")
    dirs = seg / lens[:, None]
    total = float(lens.sum())
    lam = carrier.wavelength
    E = vertical_pol(dirs[0]).astype(complex)
    for i, inter in enumerate(path.interactions):
        k_in, k_out = dirs[i], dirs[i + 1]
        before = float(lens[: i + 1].sum())
        after = total - before
        if inter.kind == "R":
            surf = scene.surfaces[inter.ref]
            E = reflect_field(E, k_in, k_out, surf.normal, scene.eta(surf.material_id, carrier))
        elif inter.kind == "D":
            edge = scene.edges[inter.ref]
            eta = scene.eta(edge.material_id, carrier)
            E = _diffract_field(E, edge, pts[i + 1], pts[i], pts[i + 2], before, after, eta, lam)
        elif inter.kind == "S":
            surf = scene.surfaces[inter.ref]
            cos_i = abs(float(np.dot(k_in, surf.normal)))
            cos_s = abs(float(np.dot(k_out, surf.normal)))
            c = scattering_coefficient(inter.roughness, cos_i, cos_s)
            g = scatter_spreading(inter.solid_angle, before, after, cos_i)
            E = c * g * float(np.linalg.norm(E)) * vertical_pol(k_out)
        else:
            raise ValueError(f"unknown interaction kind {inter.kind!r}")
    a = free_space_amplitude(total, lam) * complex(np.dot(E, vertical_pol(dirs[-1])))
    return PathAmplitude(a, total / SPEED_OF_LIGHT)


def scatter_spreading(solid_angle: float, before: float, after: float, cos_i: float) -> float:
    """Footprint/spreading factor of a diffuse patch relative to the total free-space term.

    The patch is the footprint of the ray tube (``solid_angle`` at unfolded
    distance ``before``); it re-radiates spherically over ``after``.
    """
    if cos_i <= 0.0:
        return 0.0
    area = solid_angle * before * before / cos_i
    return math.sqrt(area) * (before + after) / (before * after)
