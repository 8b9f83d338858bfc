"""Reference physics for PEC scatterers.

Plane-wave excitation, free-space Green kernels, a point-matching EFIE solver
that produces the label currents, physical-optics currents, far-field RCS and
the Mie series for a PEC sphere.

Conventions
-----------
Time dependence ``exp(+j w t)``; the scalar kernel is ``exp(-jkR) / (4 pi R)``.
The EFIE prefactor ``j k eta0`` (= ``j w mu0``) is folded into
:func:`green_dyadic`, so the discrete system reads ``sum_k G_mk J_k A_k = E_inc``
with ``J`` in A/m and ``E_inc`` in V/m.
"""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as sla
from scipy.special import spherical_jn, spherical_yn

from . import kernels
from .geometry import TriangleMesh

logger = logging.getLogger(__name__)

C0 = 299_792_458.0
ETA0 = 376.730313668
RCS_FLOOR_DBSM = -200.0


def kernel_prefactor(k: float) -> complex:
    """EFIE kernel scale ``j k eta0`` folded into :func:`green_dyadic`."""
    return 1j * k * ETA0


class CoincidentPointsError(ValueError):
    pass


class SingularSystemError(np.linalg.LinAlgError):
    pass


class NonConvergenceError(RuntimeError):
    def __init__(self, residual: float, message: str = ""):
        super().__init__(message or f"solver residual {residual:.3e} above tolerance")
        self.residual = residual


def spherical_unit_vectors(theta_deg, phi_deg):
    """``r_hat, theta_hat, phi_hat`` for angles in degrees (broadcasting)."""
    th = np.radians(np.asarray(theta_deg, dtype=float))
    ph = np.radians(np.asarray(phi_deg, dtype=float))
    st, ct, sp, cp = np.sin(th), np.cos(th), np.sin(ph), np.cos(ph)
    r = np.stack(np.broadcast_arrays(st * cp, st * sp, ct), axis=-1)
    t = np.stack(np.broadcast_arrays(ct * cp, ct * sp, -st), axis=-1)
    p = np.stack(np.broadcast_arrays(-sp, cp, np.zeros_like(sp * th)), axis=-1)
    return r, t, p


@dataclass(frozen=True)
class IncidentWave:
    """Theta-polarised plane wave arriving from direction (theta_inc, phi_inc).

    The propagation vector points from that direction toward the origin, so
    the monostatic (backscatter) observation direction is (theta_inc, phi_inc).
    """

    frequency: float = 1e9
    amplitude: float = 1.0
    theta_inc: float = 0.0
    phi_inc: float = 0.0

    def __post_init__(self):
        if not self.frequency > 0:
            raise ValueError("frequency must be positive")
        if self.amplitude < 0:
            raise ValueError("amplitude must be non-negative")
        if not 0.0 <= self.theta_inc <= 180.0:
            raise ValueError("theta_inc must lie in [0, 180] degrees")
        if not 0.0 <= self.phi_inc < 360.0:
            raise ValueError("phi_inc must lie in [0, 360) degrees")

    @property
    def wavenumber(self) -> float:
        return 2.0 * math.pi * self.frequency / C0

    @property
    def wavelength(self) -> float:
        return C0 / self.frequency

    @property
    def k_hat(self) -> np.ndarray:
        r, _, _ = spherical_unit_vectors(self.theta_inc, self.phi_inc)
        return -r

    @property
    def polarization(self) -> np.ndarray:
        _, t, _ = spherical_unit_vectors(self.theta_inc, self.phi_inc)
        return t

    def with_angles(self, theta_inc: float, phi_inc: float) -> IncidentWave:
        return IncidentWave(self.frequency, self.amplitude, theta_inc, phi_inc)


def incident_field(wave: IncidentWave, p) -> np.ndarray:
    """``E = amplitude * theta_hat * exp(-j k k_hat . p)`` at one point or an (N, 3) array."""
    p = np.asarray(p, dtype=float)
    phase = np.exp(-1j * wave.wavenumber * (p @ wave.k_hat))
    return wave.amplitude * np.multiply.outer(phase, wave.polarization)


def incident_magnetic_field(wave: IncidentWave, p) -> np.ndarray:
    return np.cross(wave.k_hat, incident_field(wave, p)) / ETA0


def green_scalar(p, q, k: float) -> complex:
    d = np.asarray(p, dtype=float) - np.asarray(q, dtype=float)
    R = float(np.sqrt(d @ d))
    if R == 0.0:
        raise CoincidentPointsError("green_scalar needs distinct points")
    return complex(np.exp(-1j * k * R) / (4.0 * math.pi * R))


def green_dyadic(p, q, k: float) -> np.ndarray:
    """Scaled dyadic kernel ``j k eta0 (I + grad grad / k^2) g`` as a 3x3 matrix.

    Closed form, with ``u = 1 / (kR)``::

        g [(1 - j u - u^2) I - (1 - 3 j u - 3 u^2) R_hat R_hat^T]
    """
    d = np.asarray(p, dtype=float) - np.asarray(q, dtype=float)
    R = float(np.sqrt(d @ d))
    if R == 0.0:
        raise CoincidentPointsError("green_dyadic needs distinct points")
    rh = d / R
    u = 1.0 / (k * R)
    g = np.exp(-1j * k * R) / (4.0 * math.pi * R)
    G = g * ((1 - 1j * u - u * u) * np.eye(3) - (1 - 3j * u - 3 * u * u) * np.outer(rh, rh))
    return kernel_prefactor(k) * G


SCHEMES = ("near", "disc", "centroid")


def self_term_coefficients(areas: np.ndarray, k: float, mode: str = "disc") -> np.ndarray:
    """Diagonal coefficient for each face's self block (``coefficient * I``).

    ``disc`` integrates the kernel over the equal-area disc: the weakly
    singular part gives ``(1 - exp(-jkr)) / (2jk)`` and the line charge on the
    rim of a uniform current gives ``-(1 + jkr) exp(-jkr) / (4 k^2 r)``.
    ``centroid`` keeps only the static ``A / (4 pi r)`` and is far less accurate.
    """
    areas = np.asarray(areas, dtype=float)
    r = np.sqrt(areas / math.pi)
    if mode == "disc":
        e = np.exp(-1j * k * r)
        coeff = (1 - e) / (2j * k) - (1 + 1j * k * r) * e / (4 * k * k * r)
    elif mode == "centroid":
        coeff = areas / (4 * math.pi * r)
    else:
        raise ValueError(f"unknown self-term mode {mode!r}")
    return kernel_prefactor(k) * coeff


def near_pairs(mesh: TriangleMesh, radius: float) -> np.ndarray:
    """Face pairs (i < j) whose centroids are closer than ``radius``, sorted."""
    from scipy.spatial import cKDTree

    pairs = cKDTree(mesh.centroids).query_pairs(radius, output_type="ndarray")
    if len(pairs) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    pairs = np.sort(pairs, axis=1)
    return pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]


def tangential_projectors(normals: np.ndarray) -> np.ndarray:
    n = np.asarray(normals, dtype=float)
    return np.eye(3)[None] - n[:, :, None] * n[:, None, :]


@dataclass(frozen=True, eq=False)
class ImpedanceSystem:
    """Dense collocation system ``Z I = V`` with three unknowns per face.

    Unknowns are ordered face-major: ``I[3 m + c]`` is component ``c`` of the
    current on face ``m``. ``Z`` depends only on mesh and frequency, so one
    system serves every incidence angle via :meth:`rhs`.
    """

    Z: np.ndarray
    V: np.ndarray
    normals: np.ndarray
    block_size: int = 3

    def __post_init__(self):
        n = self.Z.shape[0]
        if self.Z.shape != (n, n) or self.V.shape != (n,) or n != self.block_size * len(self.normals):
            raise ValueError("inconsistent impedance system shapes")

    @property
    def n_faces(self) -> int:
        return len(self.normals)

    def block(self, m: int, q: int) -> np.ndarray:
        return self.Z[3 * m : 3 * m + 3, 3 * q : 3 * q + 3]

    def residual(self, currents: np.ndarray) -> float:
        I = np.asarray(currents).reshape(-1)
        nv = np.linalg.norm(self.V)
        r = np.linalg.norm(self.Z @ I - self.V)
        return float(r / nv) if nv > 0 else float(r)


def excitation_vector(mesh: TriangleMesh, wave: IncidentWave) -> np.ndarray:
    """Tangential incident field at every centroid, flattened face-major."""
    E = incident_field(wave, mesh.centroids)
    return np.einsum("mab,mb->ma", tangential_projectors(mesh.normals), E).reshape(-1)


def impedance_matrix(mesh: TriangleMesh, k: float, scheme: str = "near", near_factor: float = 2.0) -> np.ndarray:
    """Collocation impedance matrix, shape (3K, 3K).

    Every block is ``prefactor * P_m M_mk P_k`` with ``P = I - n n^T``. Far
    blocks use the single-point rule ``M = G(p_m, p_k) A_k``. Under the default
    ``near`` scheme, pairs closer than ``near_factor`` mean edge lengths and the
    self blocks integrate the kernel over the source triangle (line-charge form
    for the hypersingular part), then are symmetrised so that
    ``Z_mk = (A_k / A_m) Z_km^T`` holds exactly. A normal term ``n n^T c``
    makes each diagonal block invertible and pins ``n . J = 0``.
    ``disc`` and ``centroid`` use the point rule everywhere with a closed-form
    self coefficient.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown assembly scheme {scheme!r}; expected one of {SCHEMES}")
    c, n, a = mesh.centroids, mesh.normals, mesh.areas
    K = mesh.n_faces
    pref = kernel_prefactor(k)
    if scheme != "near":
        return kernels.assemble_impedance(c, n, a, k, pref, self_term_coefficients(a, k, scheme))

    Z = kernels.assemble_impedance(c, n, a, k, pref, np.zeros(K, dtype=np.complex128)).reshape(K, 3, K, 3)
    P = tangential_projectors(n)
    tri = mesh.vertices[mesh.faces]

    S = pref * np.einsum("mab,mbc,mcd->mad", P, kernels.self_integrals(tri, n, k), P)
    S = 0.5 * (S + S.transpose(0, 2, 1))
    S += self_term_coefficients(a, k, "centroid")[:, None, None] * (n[:, :, None] * n[:, None, :])
    idx = np.arange(K)
    Z[idx, :, idx, :] = S

    pairs = near_pairs(mesh, near_factor * mesh.mean_edge_length())
    if len(pairs):
        i, j = pairs[:, 0], pairs[:, 1]
        Bij = pref * np.einsum("mab,mbc,mcd->mad", P[i], kernels.triangle_integrals(c[i], tri[j], n[j], k), P[j])
        Bji = pref * np.einsum("mab,mbc,mcd->mad", P[j], kernels.triangle_integrals(c[j], tri[i], n[i], k), P[i])
        ratio = (a[j] / a[i])[:, None, None]
        Zij = 0.5 * (Bij + ratio * Bji.transpose(0, 2, 1))
        Z[i, :, j, :] = Zij
        Z[j, :, i, :] = Zij.transpose(0, 2, 1) / ratio
    return Z.reshape(3 * K, 3 * K)


def assemble_system(mesh: TriangleMesh, wave: IncidentWave, scheme: str = "near") -> ImpedanceSystem:
    """Collocation EFIE system on face centroids (see :func:`impedance_matrix`).

    The right-hand side is the tangential incident field at each centroid.
    Warns when the mean edge length exceeds a fifth of a wavelength.
    """
    if mesh.n_faces < 1:
        raise ValueError("mesh has no faces")
    edge = mesh.mean_edge_length()
    if edge > wave.wavelength / 5:
        warnings.warn(
            f"mean edge length {edge:.4g} m exceeds lambda/5 = {wave.wavelength / 5:.4g} m",
            stacklevel=2,
        )
    Z = impedance_matrix(mesh, wave.wavenumber, scheme)
    return ImpedanceSystem(Z, excitation_vector(mesh, wave), mesh.normals)


@dataclass(frozen=True, eq=False)
class SurfaceCurrentField:
    """Complex surface current per face, shape (K, 3), A/m."""

    currents: np.ndarray
    residual: float | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "currents", np.asarray(self.currents, dtype=np.complex128).reshape(-1, 3))

    def __len__(self) -> int:
        return len(self.currents)

    def magnitude(self) -> np.ndarray:
        return np.sqrt(np.sum(np.abs(self.currents) ** 2, axis=1))

    def to_channels(self) -> np.ndarray:
        """(K, 6) real array ordered ReJx, ImJx, ReJy, ImJy, ReJz, ImJz."""
        out = np.empty((len(self.currents), 6))
        out[:, 0::2] = self.currents.real
        out[:, 1::2] = self.currents.imag
        return out

    @classmethod
    def from_channels(cls, channels: np.ndarray, residual: float | None = None) -> SurfaceCurrentField:
        ch = np.asarray(channels, dtype=float).reshape(-1, 6)
        return cls(ch[:, 0::2] + 1j * ch[:, 1::2], residual)

    def projected(self, normals: np.ndarray) -> SurfaceCurrentField:
        J = np.einsum("mab,mb->ma", tangential_projectors(normals), self.currents)
        return SurfaceCurrentField(J, self.residual)

    def scaled(self, factor: complex) -> SurfaceCurrentField:
        return SurfaceCurrentField(self.currents * factor, self.residual)


class FactorizedSystem:
    """LU factors of ``Z`` reused across right-hand sides."""

    def __init__(self, Z: np.ndarray, rtol: float = 1e-8, max_refine: int = 3):
        self.Z = Z
        self.rtol = rtol
        self.max_refine = max_refine
        with warnings.catch_warnings():
            warnings.simplefilter("error", sla.LinAlgWarning)
            try:
                self.lu = sla.lu_factor(Z, check_finite=True)
            except (sla.LinAlgWarning, np.linalg.LinAlgError, ValueError) as exc:
                raise SingularSystemError(f"impedance matrix is singular: {exc}") from exc
        anorm = np.linalg.norm(Z, 1)
        rcond, info = sla.lapack.zgecon(self.lu[0], anorm, norm="1")
        if info != 0 or not np.isfinite(rcond) or rcond < np.finfo(float).eps:
            raise SingularSystemError(f"condition estimate overflow (rcond={rcond:.3e})")
        self.rcond = float(rcond)

    def solve(self, V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Solve for one or many right-hand sides (columns); returns (I, relative residuals)."""
        V = np.asarray(V, dtype=np.complex128)
        single = V.ndim == 1
        B = V[:, None] if single else V
        X = sla.lu_solve(self.lu, B)
        norms = np.linalg.norm(B, axis=0)
        safe = np.where(norms > 0, norms, 1.0)
        res = np.linalg.norm(self.Z @ X - B, axis=0) / safe
        for _ in range(self.max_refine):
            if np.all(res <= self.rtol):
                break
            X = X + sla.lu_solve(self.lu, B - self.Z @ X)
            res = np.linalg.norm(self.Z @ X - B, axis=0) / safe
        if np.any(res > self.rtol):
            raise NonConvergenceError(float(res.max()))
        return (X[:, 0], res[0:1]) if single else (X, res)


def solve_currents(system: ImpedanceSystem, mesh: TriangleMesh, rtol: float = 1e-8) -> SurfaceCurrentField:
    """Direct LU solve with iterative refinement, then tangential projection."""
    if system.n_faces != mesh.n_faces:
        raise ValueError("system and mesh face counts differ")
    if not np.any(system.V):
        return SurfaceCurrentField(np.zeros((mesh.n_faces, 3)), 0.0)
    I, res = FactorizedSystem(system.Z, rtol).solve(system.V)
    return SurfaceCurrentField(I.reshape(-1, 3), float(res[0])).projected(mesh.normals)


def physical_optics_currents(mesh: TriangleMesh, wave: IncidentWave) -> SurfaceCurrentField:
    """``J = 2 n x H_inc`` on lit faces (``n . k_hat < 0``), zero elsewhere."""
    H = incident_magnetic_field(wave, mesh.centroids)
    J = 2.0 * np.cross(mesh.normals, H)
    lit = mesh.normals @ wave.k_hat < 0
    J[~lit] = 0.0
    return SurfaceCurrentField(J)


def radiated_fields(currents: SurfaceCurrentField, mesh: TriangleMesh, wave: IncidentWave, directions) -> np.ndarray:
    """Far-field radiation vectors ``F(r_hat)`` for an (N, 3) array of unit directions.

    ``F = (-j k eta0 / 4 pi) (I - r r^T) sum_k J_k A_k exp(+j k r . p_k)``;
    the scattered field is ``F exp(-jkR) / R``.
    """
    r = np.atleast_2d(np.asarray(directions, dtype=float))
    k = wave.wavenumber
    phase = np.exp(1j * k * (r @ mesh.centroids.T))  # (N, K)
    S = phase @ (currents.currents * mesh.areas[:, None])  # (N, 3)
    S = S - r * np.einsum("nj,nj->n", r, S)[:, None]
    return (-1j * k * ETA0 / (4 * math.pi)) * S


def radiated_field(currents: SurfaceCurrentField, mesh: TriangleMesh, wave: IncidentWave, direction) -> np.ndarray:
    d = np.asarray(direction, dtype=float)
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise ValueError("direction must be a unit vector")
    return radiated_fields(currents, mesh, wave, d[None])[0]


@dataclass(frozen=True)
class AngleCut:
    """Observation directions along a constant-phi cut, theta ascending."""

    theta_deg: tuple[float, ...]
    phi_deg: float = 0.0

    def __post_init__(self):
        th = np.asarray(self.theta_deg, dtype=float)
        if th.size == 0:
            raise ValueError("angle sweep is empty")
        if np.any(np.diff(th) <= 0):
            raise ValueError("theta must be strictly increasing along the cut")
        object.__setattr__(self, "theta_deg", tuple(float(x) for x in th))

    @classmethod
    def phi_cut(cls, phi: float = 0.0, start: float = 0.0, stop: float = 180.0, step: float = 1.0) -> AngleCut:
        n = int(round((stop - start) / step)) + 1
        return cls(tuple(np.linspace(start, stop, n)), phi)

    @property
    def angles(self) -> np.ndarray:
        th = np.asarray(self.theta_deg)
        return np.stack([th, np.full_like(th, self.phi_deg)], axis=1)

    def directions(self) -> np.ndarray:
        r, _, _ = spherical_unit_vectors(np.asarray(self.theta_deg), self.phi_deg)
        return r

    @property
    def descriptor(self) -> str:
        return f"phi={self.phi_deg:g}deg"


@dataclass(frozen=True, eq=False)
class RCSProfile:
    angles: np.ndarray
    sigma_dbsm: np.ndarray
    cut_descriptor: str = ""

    @property
    def sigma_m2(self) -> np.ndarray:
        return 10.0 ** (self.sigma_dbsm / 10.0)

    def to_csv(self, path, header_comment: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh)
            w.writerow(["theta_deg", "phi_deg", "sigma_dbsm"])
            for (th, ph), s in zip(self.angles, self.sigma_dbsm):
                w.writerow([repr(float(th)), repr(float(ph)), repr(float(s))])

    @classmethod
    def from_csv(cls, path) -> RCSProfile:
        rows = list(csv.reader(line for line in open(path) if not line.startswith("#")))
        data = np.array([[float(x) for x in r] for r in rows[1:]]).reshape(-1, 3)
        return cls(data[:, :2], data[:, 2])


def to_dbsm(sigma_m2) -> np.ndarray:
    s = np.asarray(sigma_m2, dtype=float)
    with np.errstate(divide="ignore"):
        db = 10.0 * np.log10(s)
    return np.maximum(np.where(np.isfinite(db), db, RCS_FLOOR_DBSM), RCS_FLOOR_DBSM)


def bistatic_rcs(currents: SurfaceCurrentField, mesh: TriangleMesh, wave: IncidentWave, cut: AngleCut) -> RCSProfile:
    """``sigma = 4 pi |F|^2 / |E_inc|^2`` in dBsm, floored at -200 dBsm."""
    F = radiated_fields(currents, mesh, wave, cut.directions())
    power = np.sum(np.abs(F) ** 2, axis=1)
    sigma = 4.0 * math.pi * power / wave.amplitude**2 if wave.amplitude > 0 else np.zeros_like(power)
    return RCSProfile(cut.angles, to_dbsm(sigma), cut.descriptor)


# --------------------------------------------------------------------------
# Mie series for a PEC sphere


def _mie_coefficients(x: float, nmax: int):
    n = np.arange(1, nmax + 1)
    jn = spherical_jn(n, x)
    jp = spherical_jn(n, x, derivative=True)
    yn = spherical_yn(n, x)
    yp = spherical_yn(n, x, derivative=True)
    hn = jn + 1j * yn
    hp = jp + 1j * yp
    a = (jn + x * jp) / (hn + x * hp)  # [x j_n]' / [x h_n]'
    b = jn / hn
    return a, b


def _pi_tau(nmax: int, mu: np.ndarray):
    pi = np.zeros((nmax + 1, mu.size))
    tau = np.zeros_like(pi)
    pi[1] = 1.0
    for n in range(2, nmax + 1):
        pi[n] = ((2 * n - 1) * mu * pi[n - 1] - n * pi[n - 2]) / (n - 1)
    for n in range(1, nmax + 1):
        tau[n] = n * mu * pi[n] - (n + 1) * pi[n - 1]
    return pi[1:], tau[1:]


def mie_amplitudes(x: float, scattering_angle_rad, nmax: int):
    """Scattering amplitudes ``S1, S2`` of a PEC sphere with size parameter ``x``."""
    mu = np.cos(np.atleast_1d(np.asarray(scattering_angle_rad, dtype=float)))
    a, b = _mie_coefficients(x, nmax)
    pi, tau = _pi_tau(nmax, mu)
    n = np.arange(1, nmax + 1)[:, None]
    w = (2 * n + 1) / (n * (n + 1))
    S1 = np.sum(w * (a[:, None] * pi + b[:, None] * tau), axis=0)
    S2 = np.sum(w * (a[:, None] * tau + b[:, None] * pi), axis=0)
    return S1, S2


def mie_nmax(x: float) -> int:
    return int(math.ceil(x + 4.0 * x ** (1.0 / 3.0) + 2.0))


def mie_sigma(radius: float, wave: IncidentWave, directions, nmax: int | None = None) -> np.ndarray:
    """Bistatic RCS (m^2) of a PEC sphere centred at the origin."""
    k = wave.wavenumber
    x = k * radius
    nmax = nmax or mie_nmax(x)
    r = np.atleast_2d(np.asarray(directions, dtype=float))
    kh = wave.k_hat
    e = wave.polarization
    cos_sc = np.clip(r @ kh, -1.0, 1.0)
    S1, S2 = mie_amplitudes(x, np.arccos(cos_sc), nmax)
    m = np.cross(kh, r)
    mn = np.linalg.norm(m, axis=1)
    perp = np.zeros(len(r))
    ok = mn > 1e-12
    perp[ok] = (m[ok] @ e) / mn[ok]
    sin2 = perp**2
    return (4.0 * math.pi / k**2) * (np.abs(S2) ** 2 * (1 - sin2) + np.abs(S1) ** 2 * sin2)


def mie_reference(radius: float, wave: IncidentWave, cut: AngleCut, tol_db: float = 0.01) -> RCSProfile:
    """Mie-series bistatic RCS along ``cut``; truncation checked against ``nmax + 5``."""
    x = wave.wavenumber * radius
    if not 0.1 < x < 50.0:
        raise ValueError(f"ka = {x:.4g} outside the supported range (0.1, 50)")
    dirs = cut.directions()
    nmax = mie_nmax(x)
    s = to_dbsm(mie_sigma(radius, wave, dirs, nmax))
    s_more = to_dbsm(mie_sigma(radius, wave, dirs, nmax + 5))
    worst = float(np.max(np.abs(s - s_more)))
    if worst >= tol_db:
        raise NonConvergenceError(worst, f"Mie series not converged: {worst:.3g} dB change at nmax+5")
    return RCSProfile(cut.angles, s, cut.descriptor)


# --------------------------------------------------------------------------
# CSV I/O

CURRENT_COLUMNS = ("faceIndex", "ReJx", "ImJx", "ReJy", "ImJy", "ReJz", "ImJz")


def write_currents_csv(currents: SurfaceCurrentField, path, header_comment: str | None = None) -> None:
    ch = currents.to_channels()
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh)
        w.writerow(CURRENT_COLUMNS)
        for i, row in enumerate(ch):
            w.writerow([i] + [f"{v:.17g}" for v in row])


def read_currents_csv(path) -> SurfaceCurrentField:
    with open(path) as fh:
        rows = list(csv.reader(line for line in fh if not line.startswith("#")))
    if not rows or tuple(rows[0]) != CURRENT_COLUMNS:
        raise ValueError(f"{path}: unexpected current CSV header")
    data = np.array([[float(x) for x in r] for r in rows[1:]]).reshape(-1, 7)
    if np.any(data[:, 0] != np.arange(len(data))):
        raise ValueError(f"{path}: face indices must be 0..K-1 in order")
    return SurfaceCurrentField.from_channels(data[:, 1:])


def solve_many(mesh: TriangleMesh, waves: Sequence[IncidentWave], scheme: str = "near",
               rtol: float = 1e-8) -> tuple[np.ndarray, list[SurfaceCurrentField]]:
    """One factorisation, many incidence angles (all waves share one frequency)."""
    freqs = {w.frequency for w in waves}
    if len(freqs) != 1:
        raise ValueError("solve_many needs a single frequency")
    Z = impedance_matrix(mesh, waves[0].wavenumber, scheme)
    V = np.stack([excitation_vector(mesh, w) for w in waves], axis=1)
    X, res = FactorizedSystem(Z, rtol).solve(V)
    fields = [
        SurfaceCurrentField(X[:, i].reshape(-1, 3), float(res[i])).projected(mesh.normals)
        for i in range(len(waves))
    ]
    return Z, fields
