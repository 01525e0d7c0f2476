import numpy as np
import pytest

from qlmass.initialdata import (
    CovectorField,
    InitialDataError,
    QuasiLocalBoundaryData,
    UniformExpansionData,
    adm_integrals,
    extract_boundary_data,
    fibonacci_directions,
    fit_decay_order,
    provider_bowen_york,
    provider_flat,
    provider_schwarzschild,
    read_boundary_fields,
    write_boundary_fields,
)
from qlmass.mesh import icosphere


@pytest.fixture(scope="module")
def schw():
    return provider_schwarzschild(1.0)


def test_schwarzschild_metric_factor(schw):
    g = schw.metric(np.array([[10.0, 0.0, 0.0]]))[0]
    assert abs(g[0, 0] - 1.05**4) < 1e-14
    assert abs(g[0, 0] - 1.21550625) < 1e-12


def test_flat_provider_trivial():
    flat = provider_flat()
    x = np.array([[1.0, 2.0, 3.0], [0.1, 0.0, -4.0]])
    mu, J = flat.constraint_fields(x)
    assert np.all(mu == 0.0) and np.all(J == 0.0)
    np.testing.assert_allclose(
        flat.metric(x), np.broadcast_to(np.eye(3), (2, 3, 3))
    )


def test_schwarzschild_vacuum(schw):
    dirs = fibonacci_directions(12)
    for r in (5.0, 12.0, 20.0):
        mu, J = schw.constraint_fields(r * dirs)
        assert np.abs(mu).max() < 1e-6
        assert np.abs(J).max() < 1e-6


def test_schwarzschild_scalar_curvature_vanishes(schw):
    pts = np.array([[6.0, 1.0, -2.0], [0.0, 8.0, 3.0]])
    assert np.abs(schw.scalar_curvature(pts)).max() < 1e-8


def test_bowen_york_constraints():
    by = provider_bowen_york(np.array([0.0, 0.0, 0.1]))
    pts = 7.0 * fibonacci_directions(16)
    mu, J = by.constraint_fields(pts)
    k = by.extrinsic(pts)
    ksq = np.einsum("nij,nij->n", k, k)
    np.testing.assert_allclose(mu, -0.5 * ksq, atol=1e-10)
    assert np.abs(J).max() < 1e-9
    assert not by.dec_satisfied()


def test_dec_classifier(schw):
    assert provider_flat().dec_satisfied()
    assert schw.dec_satisfied()


def test_decay_orders(schw):
    tau_g, tau_k = fit_decay_order(schw)
    assert abs(tau_g - 1.0) < 0.1
    tau_g2, tau_k2 = fit_decay_order(
        provider_bowen_york(np.array([0.1, 0.0, 0.0]))
    )
    assert tau_g2 is None
    assert abs(tau_k2 - 1.0) < 0.1


def test_domain_errors(schw):
    with pytest.raises(InitialDataError):
        schw.metric(np.zeros((1, 3)))
    with pytest.raises(InitialDataError):
        provider_schwarzschild(-1.0)
    with pytest.raises(InitialDataError):
        provider_bowen_york(np.array([np.inf, 0.0, 0.0]))


def test_sphere_mean_curvature_closed_form(schw):
    # isotropic coordinate sphere: H = 2/(psi^2 R) - 2m/(R^2 psi^3)
    for R in (5.0, 10.0):
        psi = 1.0 + 0.5 / R
        exact = 2.0 / (psi**2 * R) - 2.0 / (R**2 * psi**3)
        pts = R * fibonacci_directions(8)
        np.testing.assert_allclose(
            schw.sphere_mean_curvature(pts), exact, rtol=1e-9
        )


def test_flat_boundary_data_trivial():
    bd = extract_boundary_data(provider_flat(), 1.0, level=3)
    np.testing.assert_allclose(bd.H, 2.0, rtol=2e-3)
    assert np.abs(bd.trk).max() == 0.0
    assert np.abs(bd.alpha.ambient).max() == 0.0


def test_schwarzschild_boundary_data(schw):
    R, m = 10.0, 1.0
    bd = extract_boundary_data(schw, R, level=3)
    psi = 1.0 + m / (2.0 * R)
    exact = 2.0 / (psi**2 * R) - 2.0 * m / (R**2 * psi**3)
    np.testing.assert_allclose(bd.H, exact, rtol=1e-9)
    # conformal flatness: each edge length is psi(|mid|)^2 times the chord
    mesh = bd.geom.mesh
    X = bd.positions
    i, j = mesh.edges[:, 0], mesh.edges[:, 1]
    mid = 0.5 * (X[i] + X[j])
    psi_mid = 1.0 + m / (2.0 * np.linalg.norm(mid, axis=1))
    chord = np.linalg.norm(X[j] - X[i], axis=1)
    np.testing.assert_allclose(
        bd.geom.metric.edge_lengths, psi_mid**2 * chord, rtol=1e-12
    )
    # and agrees with the constant-factor scaling at the sphere radius
    flat_bd = extract_boundary_data(provider_flat(), R, level=3)
    np.testing.assert_allclose(
        bd.geom.metric.edge_lengths,
        psi**2 * flat_bd.geom.metric.edge_lengths,
        rtol=1e-3,
    )


def test_bowen_york_boundary_data():
    p = 0.1
    by = provider_bowen_york(np.array([0.0, 0.0, p]))
    R = 10.0
    bd = extract_boundary_data(by, R, level=3)
    np.testing.assert_allclose(bd.H, 2.0 / R, rtol=1e-10)
    # closed form: tangential trace of k on the coordinate sphere
    z = bd.positions[:, 2] / R
    exact = (3.0 / (2.0 * R**2)) * (2.0 * p * z - 2.0 * p * z)
    k = by.extrinsic(bd.positions)
    nu = bd.positions / R
    trk_exact = np.einsum("nii->n", k) - np.einsum("nij,ni,nj->n", k, nu, nu)
    np.testing.assert_allclose(bd.trk, trk_exact, atol=1e-10)
    assert np.abs(exact).max() < 1e-15  # the two radial terms cancel


def test_spacelike_invariant_enforced():
    # strong uniform expansion makes |trK| exceed H on a unit sphere
    data = UniformExpansionData(c=3.0)
    with pytest.raises(InitialDataError, match="spacelike"):
        extract_boundary_data(data, 1.0, level=2)


def test_adm_schwarzschild(schw):
    rep = adm_integrals(schw, [10.0, 20.0, 40.0, 80.0])
    assert abs(rep["E"] - 1.0) < 0.005
    assert np.abs(rep["P"]).max() < 1e-3


def test_adm_flat():
    rep = adm_integrals(provider_flat(), [5.0, 10.0])
    assert abs(rep["E"]) < 1e-12
    assert np.abs(rep["P"]).max() < 1e-12


def test_adm_bowen_york():
    p = np.array([0.0, 0.0, 0.1])
    rep = adm_integrals(provider_bowen_york(p), [10.0, 20.0])
    np.testing.assert_allclose(rep["P"], p, atol=1e-3)
    assert abs(rep["E"]) < 1e-3


def test_boundary_consistency_with_embedding():
    # flat provider on the unit sphere must match the reference data of
    # the identity embedding
    from qlmass.embedding import EmbeddingResult

    mesh = icosphere(3)
    bd = extract_boundary_data(provider_flat(), 1.0, mesh=mesh)
    emb = EmbeddingResult(mesh, mesh.vertices, 0.0, 0)
    # the analytic H is exactly 2; the discrete mean curvature matches it
    # to the scheme's second-order accuracy
    np.testing.assert_allclose(bd.H, emb.mean_curvature, atol=1e-4)
    np.testing.assert_allclose(
        bd.geom.metric.edge_lengths,
        emb.achieved_metric.edge_lengths,
        rtol=1e-12,
    )


def test_boundary_fields_roundtrip(tmp_path):
    by = provider_bowen_york(np.array([0.03, -0.02, 0.1]))
    bd = extract_boundary_data(by, 10.0, level=2)
    path = tmp_path / "fields.txt"
    write_boundary_fields(path, bd)
    back = read_boundary_fields(path, bd.geom, radius=10.0)
    np.testing.assert_allclose(back.H, bd.H, rtol=1e-12)
    np.testing.assert_allclose(back.trk, bd.trk, atol=1e-15)
    np.testing.assert_allclose(
        back.alpha_edge_values(), bd.alpha_edge_values(), atol=1e-12
    )
