import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scatternet.emoracle import (
    ETA0,
    AngleCut,
    CoincidentPointsError,
    FactorizedSystem,
    ImpedanceSystem,
    IncidentWave,
    NonConvergenceError,
    SingularSystemError,
    SurfaceCurrentField,
    assemble_system,
    bistatic_rcs,
    green_dyadic,
    green_scalar,
    impedance_matrix,
    incident_field,
    kernel_prefactor,
    mie_reference,
    mie_sigma,
    physical_optics_currents,
    radiated_field,
    radiated_fields,
    read_currents_csv,
    solve_currents,
    solve_many,
    tangential_projectors,
    to_dbsm,
    write_currents_csv,
)
from scatternet.geometry import TriangleMesh, generate_shape

# Backscatter sigma / (pi a^2) of a PEC sphere at ka = pi, from an independent
# scipy.special spherical-Bessel evaluation of the series (nmax + 10 terms).
MIE_KA_PI_BACKSCATTER = 0.7564035606911951

vec3 = st.lists(st.floats(-1.0, 1.0), min_size=3, max_size=3).map(np.array)


# --------------------------------------------------------------------- waves

def test_incident_wave_invariants():
    w = IncidentWave(1e9, 1.0, 37.0, 123.0)
    assert np.linalg.norm(w.k_hat) == pytest.approx(1.0)
    assert abs(w.polarization @ w.k_hat) < 1e-12
    assert w.wavelength == pytest.approx(0.299792458)
    for bad in (dict(frequency=0), dict(amplitude=-1), dict(theta_inc=190), dict(phi_inc=360)):
        with pytest.raises(ValueError):
            IncidentWave(**bad)


def test_incident_field_examples():
    w = IncidentWave(1e9, 2.5, 40.0, 10.0)
    np.testing.assert_allclose(incident_field(w, np.zeros(3)), 2.5 * w.polarization)
    p = w.k_hat * w.wavelength  # k k_hat . p = 2 pi
    np.testing.assert_allclose(incident_field(w, p), 2.5 * w.polarization, atol=1e-12)
    pts = np.random.default_rng(0).normal(size=(20, 3))
    np.testing.assert_allclose(np.linalg.norm(incident_field(IncidentWave(), pts), axis=1), 1.0)


# ------------------------------------------------------------------- kernels

def test_green_scalar_examples():
    k = 2 * math.pi
    assert green_scalar([0, 0, 0], [1, 0, 0], k) == pytest.approx(1 / (4 * math.pi), abs=1e-15)
    assert green_scalar([0, 0, 0], [0, 0.5, 0], k) == pytest.approx(-1 / (2 * math.pi), abs=1e-15)
    with pytest.raises(CoincidentPointsError):
        green_scalar([1, 2, 3], [1, 2, 3], k)
    with pytest.raises(CoincidentPointsError):
        green_dyadic([1, 2, 3], [1, 2, 3], k)


@settings(max_examples=50, deadline=None)
@given(vec3, vec3)
def test_green_symmetries(p, q):
    if np.linalg.norm(p - q) < 1e-3:
        return
    k = 20.0
    assert green_scalar(p, q, k) == green_scalar(q, p, k)
    G = green_dyadic(p, q, k)
    np.testing.assert_allclose(G, G.T, rtol=1e-13, atol=0)
    np.testing.assert_allclose(G, green_dyadic(q, p, k), rtol=1e-13, atol=0)


def test_green_dyadic_far_field_limit():
    k = 2 * math.pi / 0.3
    rh = np.array([1.0, 2.0, 2.0]) / 3.0
    for R in (10.0, 100.0, 1000.0):
        G = green_dyadic(R * rh, np.zeros(3), k)
        g = green_scalar(R * rh, np.zeros(3), k)
        lim = kernel_prefactor(k) * g * (np.eye(3) - np.outer(rh, rh))
        assert np.linalg.norm(G - lim) / np.linalg.norm(lim) <= 2.0 / (k * R)


def test_green_dyadic_against_finite_difference_hessian():
    """(I + grad grad / k^2) g with the Hessian from central differences of g."""
    rng = np.random.default_rng(3)
    k = 2 * math.pi / 0.3
    for _ in range(5):
        p, q = rng.normal(size=3) * 0.2, rng.normal(size=3) * 0.2
        R = np.linalg.norm(p - q)
        h = 1e-5 * R
        H = np.zeros((3, 3), complex)
        E = np.eye(3) * h
        for a in range(3):
            for b in range(3):
                H[a, b] = (green_scalar(p + E[a] + E[b], q, k) - green_scalar(p + E[a] - E[b], q, k)
                           - green_scalar(p - E[a] + E[b], q, k) + green_scalar(p - E[a] - E[b], q, k)) / (4 * h * h)
        ref = kernel_prefactor(k) * (green_scalar(p, q, k) * np.eye(3) + H / k**2)
        G = green_dyadic(p, q, k)
        assert np.linalg.norm(G - ref) / np.linalg.norm(ref) < 1e-5
        # trace and R-hat projection identities
        assert np.trace(G) == pytest.approx(np.trace(ref), rel=1e-5)
        rh = (p - q) / R
        assert rh @ G @ rh == pytest.approx(rh @ ref @ rh, rel=1e-5)


# ------------------------------------------------------------------ assembly

def two_far_faces(gap=3.0):
    v = np.array([[0, 0, 0], [0.02, 0, 0], [0, 0.02, 0], [gap, 0, 0], [gap + 0.03, 0, 0], [gap, 0.03, 0]], float)
    return TriangleMesh(v, np.array([[0, 1, 2], [3, 4, 5]]))


@pytest.mark.parametrize("scheme", ["near", "disc", "centroid"])
def test_separated_faces_block_is_green_times_area(scheme):
    m = two_far_faces()
    w = IncidentWave()
    Z = impedance_matrix(m, w.wavenumber, scheme)
    P = tangential_projectors(m.normals)
    ref = P[0] @ green_dyadic(m.centroids[0], m.centroids[1], w.wavenumber) @ P[1] * m.areas[1]
    np.testing.assert_allclose(Z[0:3, 3:6], ref, rtol=1e-12, atol=1e-12 * np.abs(ref).max())
    # faces share the normal z, so tangential components equal the unprojected kernel
    G = green_dyadic(m.centroids[0], m.centroids[1], w.wavenumber) * m.areas[1]
    np.testing.assert_allclose(Z[0:2, 3:5], G[:2, :2], rtol=1e-12)


def test_system_shapes_and_zero_wave(small_cube):
    s = assemble_system(small_cube, IncidentWave(amplitude=0.0))
    assert s.Z.shape == (3 * small_cube.n_faces,) * 2
    assert not np.any(s.V)
    J = solve_currents(s, small_cube)
    assert not np.any(J.currents)


def test_reciprocity_of_assembled_blocks(small_cube, wave):
    Z = impedance_matrix(small_cube, wave.wavenumber).reshape(small_cube.n_faces, 3, small_cube.n_faces, 3)
    a = small_cube.areas
    lhs = Z.transpose(0, 2, 1, 3)  # [m, k] -> 3x3
    rhs = (a[None, :] / a[:, None])[..., None, None] * Z.transpose(2, 0, 3, 1)
    assert np.max(np.abs(lhs - rhs)) <= 1e-10 * np.max(np.abs(lhs))


def test_lambda_over_5_warning(wave):
    coarse = generate_shape("cube", {"side": 0.4}, wave.wavelength / 2.5)
    with pytest.warns(UserWarning, match="lambda/5"):
        assemble_system(coarse, wave)


# ------------------------------------------------------------------- solving

def test_solver_residual_and_tangential(small_cube, wave):
    s = assemble_system(small_cube, wave)
    J = solve_currents(s, small_cube)
    assert J.residual <= 1e-8
    assert s.residual(J.currents) <= 1e-8
    nJ = np.abs(np.einsum("ij,ij->i", J.currents, small_cube.normals))
    assert np.all(nJ <= 1e-6 * np.linalg.norm(J.currents, axis=1) + 1e-300)


def test_random_perturbed_system():
    rng = np.random.default_rng(1)
    n = 30
    A = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    Z = A @ A.conj().T + n * np.eye(n)
    V = rng.normal(size=n) + 0j
    X, res = FactorizedSystem(Z).solve(V)
    assert res[0] <= 1e-8
    with pytest.raises(SingularSystemError):
        FactorizedSystem(np.zeros((3, 3), complex))


def test_nonconvergence_carries_residual():
    exc = NonConvergenceError(1e-3)
    assert exc.residual == 1e-3


def test_solve_many_matches_single(small_cube):
    waves = [IncidentWave(theta_inc=t) for t in (0.0, 45.0, 90.0)]
    _, fields = solve_many(small_cube, waves)
    for w, f in zip(waves, fields):
        ref = solve_currents(assemble_system(small_cube, w), small_cube)
        np.testing.assert_allclose(f.currents, ref.currents, rtol=1e-7, atol=1e-12)


def test_translation_phase_covariance(small_cube, wave):
    d = np.array([0.07, -0.03, 0.11])
    J0 = solve_currents(assemble_system(small_cube, wave), small_cube).currents
    moved = small_cube.translated(d)
    J1 = solve_currents(assemble_system(moved, wave), moved).currents
    factor = np.exp(-1j * wave.wavenumber * (wave.k_hat @ d))
    np.testing.assert_allclose(J1, J0 * factor, rtol=1e-6, atol=1e-9 * np.abs(J0).max())
    np.testing.assert_allclose(np.linalg.norm(J1, axis=1), np.linalg.norm(J0, axis=1), rtol=1e-6)


# --------------------------------------------------------- PO and far fields

def test_physical_optics_examples():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], float) * 0.01
    up = TriangleMesh(v, np.array([[0, 1, 2]]))  # normal +z
    down = TriangleMesh(v, np.array([[0, 2, 1]]))  # normal -z
    w = IncidentWave(theta_inc=180.0)  # arrives from -z, k_hat = +z
    assert not np.any(physical_optics_currents(up, w).currents)  # n = k_hat: shadowed
    J = physical_optics_currents(down, w).currents[0]  # n = -k_hat: lit
    assert np.linalg.norm(J) == pytest.approx(2 / ETA0, rel=1e-12)


def test_po_plate_broadside_equal_magnitudes():
    plate = generate_shape("plate", {"width": 0.5, "height": 0.5}, 0.05)
    J = physical_optics_currents(plate, IncidentWave(theta_inc=0.0))
    mag = np.linalg.norm(J.currents, axis=1)
    np.testing.assert_allclose(mag, mag[0], rtol=1e-12)
    assert mag[0] > 0


def test_radiated_field_examples():
    m = TriangleMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], float) * 0.01, np.array([[0, 1, 2]]))
    w = IncidentWave()
    zero = SurfaceCurrentField(np.zeros((1, 3)))
    assert not np.any(radiated_field(zero, m, w, [0, 0, 1]))
    J = SurfaceCurrentField(np.array([[1.0, 0, 0]]))
    F = radiated_field(J, m, w, [0, 0, 1])  # r perpendicular to J
    expected = (-1j * w.wavenumber * ETA0 / (4 * math.pi)) * m.areas[0] * np.exp(
        1j * w.wavenumber * m.centroids[0, 2]) * np.array([1.0, 0, 0])
    np.testing.assert_allclose(F, expected, rtol=1e-12)
    np.testing.assert_allclose(radiated_field(J, m, w, [1, 0, 0]), 0, atol=1e-18)
    with pytest.raises(ValueError):
        radiated_field(J, m, w, [1, 1, 0])


def test_rcs_floor_and_quadratic_scaling(small_cube, wave):
    cut = AngleCut.phi_cut(0, 0, 180, 10)
    zero = bistatic_rcs(SurfaceCurrentField(np.zeros((small_cube.n_faces, 3))), small_cube, wave, cut)
    assert np.all(zero.sigma_dbsm == -200.0)
    J = physical_optics_currents(small_cube, wave)
    a = bistatic_rcs(J, small_cube, wave, cut).sigma_dbsm
    b = bistatic_rcs(J.scaled(2.0), small_cube, wave, cut).sigma_dbsm
    np.testing.assert_allclose(b - a, 20 * math.log10(2), atol=1e-9)
    assert np.all(np.isfinite(a))


def test_radiated_power_sphere_quadrature(small_cube, wave):
    J = solve_currents(assemble_system(small_cube, wave), small_cube)
    x, wx = np.polynomial.legendre.leggauss(16)
    th = np.arccos(x)
    ph = np.linspace(0, 2 * math.pi, 32, endpoint=False)
    T, P = np.meshgrid(th, ph, indexing="ij")
    dirs = np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)], -1).reshape(-1, 3)
    W = (wx[:, None] * np.full(len(ph), 2 * math.pi / len(ph))[None]).ravel()

    def power(c):
        return float(np.sum(W * np.sum(np.abs(radiated_fields(c, small_cube, wave, dirs)) ** 2, axis=1)))

    p1 = power(J)
    assert np.isfinite(p1) and p1 > 0
    assert power(J.scaled(2.0)) == pytest.approx(4 * p1, rel=1e-12)


def test_po_plate_specular_peak():
    plate = generate_shape("plate", {"width": 1.2, "height": 1.2}, 0.03)
    w = IncidentWave(theta_inc=30.0, phi_inc=0.0)
    cut = AngleCut.phi_cut(180.0, 0, 90, 1.0)  # specular lobe lies at theta = 30 on the far side
    prof = bistatic_rcs(physical_optics_currents(plate, w), plate, w, cut)
    assert abs(prof.angles[np.argmax(prof.sigma_dbsm), 0] - 30.0) <= 1.0


# ----------------------------------------------------------------------- Mie

def test_mie_frozen_backscatter_ka_pi():
    w = IncidentWave()
    a = w.wavelength / 2
    s = mie_sigma(a, w, np.array([[0.0, 0.0, 1.0]]))[0]
    assert s / (math.pi * a * a) == pytest.approx(MIE_KA_PI_BACKSCATTER, rel=1e-10)


def test_mie_geometric_optics_limit():
    w = IncidentWave()
    a = 30.0 / w.wavenumber
    s = mie_sigma(a, w, np.array([[0.0, 0.0, 1.0]]))[0]
    assert abs(s / (math.pi * a * a) - 1) <= 0.2


def test_mie_amplitude_independent_and_range():
    cut = AngleCut.phi_cut(0, 0, 180, 15)
    a = mie_reference(0.1, IncidentWave(amplitude=1.0), cut).sigma_dbsm
    b = mie_reference(0.1, IncidentWave(amplitude=7.0), cut).sigma_dbsm
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        mie_reference(1e-5, IncidentWave(), cut)


# ----------------------------------------------------------------------- I/O

def test_currents_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    J = SurfaceCurrentField(rng.normal(size=(5, 3)) + 1j * rng.normal(size=(5, 3)))
    write_currents_csv(J, tmp_path / "j.csv", "config_hash=abc")
    assert (tmp_path / "j.csv").read_text().startswith("# config_hash=abc\nfaceIndex,ReJx,ImJx")
    np.testing.assert_array_equal(read_currents_csv(tmp_path / "j.csv").currents, J.currents)


def test_angle_cut_validation():
    with pytest.raises(ValueError):
        AngleCut(())
    with pytest.raises(ValueError):
        AngleCut((0.0, 0.0))
    assert to_dbsm(0.0) == -200.0
