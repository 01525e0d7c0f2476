import csv

import numpy as np
import pytest

from qlmass.embedding import EmbeddingResult, align_embedding, embed_metric
from qlmass.energy import (
    EnergyError,
    FrameField,
    SurfaceData,
    canonical_frame,
    default_eps_list,
    energy,
    euler_lagrange_residual,
    hamilton_jacobi_check,
    make_observer,
    optimal_frame_gap,
    side_integral,
    write_sweep_csv,
)
from qlmass.initialdata import (
    extract_boundary_data,
    provider_bowen_york,
    provider_flat,
    provider_schwarzschild,
)
from qlmass.mesh import icosphere

# independent 1D axisymmetric quadrature value for the exterior sphere of
# the mass-1 conformally flat slice at coordinate radius 10
SCHW_E_R10 = 1.068044510


def _flat_setup(level):
    mesh = icosphere(level)
    bd = extract_boundary_data(provider_flat(), 1.0, mesh=mesh)
    emb = embed_metric(mesh, bd.geom.metric, degree=16, tol=1e-10)
    emb = align_embedding(emb, bd.positions)
    return bd, emb


@pytest.fixture(scope="module")
def flat3():
    return _flat_setup(3)


@pytest.fixture(scope="module")
def schw4():
    mesh = icosphere(4)
    bd = extract_boundary_data(provider_schwarzschild(1.0), 10.0, mesh=mesh)
    emb = embed_metric(mesh, bd.geom.metric, degree=16, tol=1e-10)
    emb = align_embedding(emb, bd.positions)
    return bd, emb


def test_observer_basics(flat3):
    _, emb = flat3
    obs = make_observer(emb, np.array([0.0, 0.0, 1.0]))
    np.testing.assert_allclose(obs.uA, emb.positions[:, 2], atol=1e-12)
    assert abs(np.abs(obs.uA).max() - 1.0) < 1e-6
    neg = make_observer(emb, np.array([0.0, 0.0, -1.0]))
    np.testing.assert_allclose(neg.uA, -obs.uA, atol=1e-15)
    with pytest.raises(EnergyError):
        make_observer(emb, np.zeros(3))
    with pytest.raises(EnergyError):
        make_observer(emb, np.array([0.0, 0.0, 1.5]))


def test_canonical_frame_closed_form(flat3):
    # round unit sphere, u = z: sinh f = -cos(theta)/sin(theta) away from
    # the poles (the masked critical set)
    _, emb = flat3
    sd = SurfaceData.from_embedding(emb)
    obs = make_observer(emb, np.array([0.0, 0.0, 1.0]))
    frame = canonical_frame(sd, obs, 0.0)
    z = emb.positions[:, 2]
    s = np.sqrt(np.maximum(1.0 - z**2, 0.0))
    sel = (~frame.dead_vertices) & (s > 0.3)
    exact = np.arcsinh(-z[sel] / s[sel])
    np.testing.assert_allclose(frame.f[sel], exact, atol=5e-2)


def test_frame_vanishes_for_large_eps(flat3):
    _, emb = flat3
    sd = SurfaceData.from_embedding(emb)
    obs = make_observer(emb, np.array([0.0, 0.0, 1.0]))
    f_small = canonical_frame(sd, obs, 1.0).f
    f_tiny = canonical_frame(sd, obs, 100.0).f
    # f decays like 1/eps once eps dominates the gradient scale
    assert np.abs(f_tiny).max() < np.abs(f_small).max() / 50.0
    assert np.abs(f_tiny).max() < 1.5e-2


def test_ground_state_bitwise_zero(flat3):
    # identical data on both sides: the integrands cancel exactly
    _, emb = flat3
    sd = SurfaceData.from_embedding(emb)
    obs = make_observer(emb, np.array([0.3, -0.5, np.sqrt(1 - 0.34)]))
    rep = energy(sd, sd, obs)
    assert rep.E == 0.0
    assert rep.reference_term == rep.physical_term


def test_flat_provider_energy_small_and_contracts():
    values = []
    for level in (3, 4):
        bd, emb = _flat_setup(level)
        rep = energy(
            SurfaceData.from_embedding(emb),
            SurfaceData.from_boundary(bd),
            make_observer(emb, np.array([0.0, 0.0, 1.0])),
        )
        values.append(abs(rep.E))
    assert values[1] < 5e-3
    assert values[0] / values[1] > 3.5


def test_integration_by_parts_identity(flat3):
    # face integral of grad u . grad f equals the stiffness pairing, which
    # equals minus the lumped integral of f Lap u
    _, emb = flat3
    sd = SurfaceData.from_embedding(emb)
    ops = sd.ops
    obs = make_observer(emb, np.array([0.0, 0.0, 1.0]))
    frame = canonical_frame(sd, obs, 0.1)
    gu = ops.gradient(obs.uA)
    gf = ops.gradient(frame.f)
    direct = ops.integrate_faces(np.einsum("fk,fk->f", gu, gf))
    pairing = ops.dirichlet_pairing(obs.uA, frame.f)
    by_parts = -ops.integrate(frame.f * ops.laplace(obs.uA))
    assert abs(direct - pairing) < 1e-12 * max(1.0, abs(pairing))
    assert abs(by_parts - pairing) < 1e-12 * max(1.0, abs(pairing))


def test_sqrt_term_monotone_in_eps(flat3):
    _, emb = flat3
    sd = SurfaceData.from_embedding(emb)
    obs = make_observer(emb, np.array([0.0, 1.0, 0.0]))
    totals = [side_integral(sd, obs, eps)[0] for eps in (0.1, 0.3, 1.0)]
    assert totals[0] < totals[1] < totals[2]


def test_hamilton_jacobi_identity():
    # nonzero trK and alpha exercise every term of both routes
    mesh = icosphere(3)
    by = provider_bowen_york(np.array([0.03, -0.02, 0.1]))
    bd = extract_boundary_data(by, 10.0, mesh=mesh)
    emb = embed_metric(mesh, bd.geom.metric, degree=16, tol=1e-10)
    emb = align_embedding(emb, bd.positions)
    phys = SurfaceData.from_boundary(bd)
    ref = SurfaceData.from_embedding(emb)
    obs = make_observer(emb, np.array([0.0, 0.0, 1.0]))
    eps_list = default_eps_list(phys, obs) + [
        10.0 * float(np.abs(obs.uA).max())
    ]
    rows = hamilton_jacobi_check(ref, phys, obs, eps_list)
    for row in rows:
        assert row["relDifference"] < 1e-12


def test_schwarzschild_energy_oracle(schw4):
    bd, emb = schw4
    ref = SurfaceData.from_embedding(emb)
    phys = SurfaceData.from_boundary(bd)
    obs = make_observer(emb, np.array([0.0, 0.0, 1.0]))
    rep = energy(ref, phys, obs)
    assert abs(rep.E - SCHW_E_R10) / SCHW_E_R10 < 5e-3
    # time-symmetric data: a and -a give identical energies
    rep_neg = energy(ref, phys, make_observer(emb, -obs.a))
    assert abs(rep.E - rep_neg.E) < 1e-10
    # isotropy of the round sphere
    rep_x = energy(ref, phys, make_observer(emb, np.array([1.0, 0.0, 0.0])))
    assert abs(rep.E - rep_x.E) < 1e-8 * rep.E


def test_eps_limit_route_agrees(schw4):
    bd, emb = schw4
    ref = SurfaceData.from_embedding(emb)
    phys = SurfaceData.from_boundary(bd)
    obs = make_observer(emb, np.array([0.0, 0.0, 1.0]))
    rep = energy(ref, phys, obs, mode="both")
    assert rep.warnings == []
    errs = [abs(e - rep.E) for _, e in rep.eps_sequence]
    # regularized sequence approaches the explicit value on the tail
    assert errs[-1] < errs[0]
    assert errs[-1] < 1e-3 * rep.E
    rep2 = energy(ref, phys, obs, mode="epsLimit")
    assert abs(rep2.E - rep.E) < 1e-3 * rep.E


def test_bowen_york_antisymmetry():
    by = provider_bowen_york(np.array([0.0, 0.0, 0.1]))
    mesh = icosphere(3)
    bd = extract_boundary_data(by, 10.0, mesh=mesh)
    emb = embed_metric(mesh, bd.geom.metric, degree=16, tol=1e-10)
    emb = align_embedding(emb, bd.positions)
    phys = SurfaceData.from_boundary(bd)
    ref = SurfaceData.from_embedding(emb)
    e_plus = energy(ref, phys, make_observer(emb, np.array([0.0, 0.0, 1.0])))
    e_minus = energy(ref, phys, make_observer(emb, np.array([0.0, 0.0, -1.0])))
    anti = e_plus.E - e_minus.E
    assert abs(anti - (-0.2)) < 0.05 * 0.2


def test_optimal_frame_gaps(flat3):
    _, emb = flat3
    sd = SurfaceData.from_embedding(emb)
    obs = make_observer(emb, np.array([0.0, 0.0, 1.0]))
    base, frame = side_integral(sd, obs, 0.0)
    rng = np.random.default_rng(7)
    trials = [frame.f]
    x = emb.positions
    for _ in range(20):
        c = rng.normal(size=6)
        bump = (
            c[0] * x[:, 0] * x[:, 1] + c[1] * (x[:, 0] ** 2 - x[:, 1] ** 2)
            + c[2] * x[:, 2] * x[:, 0] + c[3] * x[:, 2] * x[:, 1]
            + c[4] * x[:, 2] + c[5]
        )
        amp = np.abs(bump).max()
        trials.append(frame.f + bump / max(amp, 1.0) * rng.uniform(0.05, 1.0))
    gaps = optimal_frame_gap(sd, obs, 0.0, trials)
    assert abs(gaps[0]) < 1e-12 * abs(base)
    assert min(gaps) > -1e-9 * abs(base)
    assert max(gaps) > 0.0


def test_euler_lagrange_ground_state():
    norms = []
    for level in (3, 4):
        _, emb = _flat_setup(level)
        sd = SurfaceData.from_embedding(emb)
        obs = make_observer(emb, np.array([0.0, 0.0, 1.0]))
        out = euler_lagrange_residual(sd, obs)
        scale = 8.0 * np.pi
        assert abs(out["totalIntegral"]) < 1e-8 * scale
        assert abs(out["distributionalCharges"]["min"] - 2.0 * np.pi) \
            < 0.05 * 2.0 * np.pi
        assert abs(out["distributionalCharges"]["max"] + 2.0 * np.pi) \
            < 0.05 * 2.0 * np.pi
        norms.append(out["interiorL2"])
    assert norms[1] < norms[0]


def test_report_serialization(tmp_path, flat3):
    bd, emb = flat3
    ref = SurfaceData.from_embedding(emb)
    phys = SurfaceData.from_boundary(bd)
    rows = []
    for a in (np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0])):
        obs = make_observer(emb, a)
        rep = energy(ref, phys, obs, mode="both")
        d = rep.to_dict()
        assert set(d) >= {
            "E", "referenceTerm", "physicalTerm", "termBreakdown",
            "epsSequence", "criticalAreaFraction", "admissibleFlag",
        }
        assert abs(d["E"] - (d["referenceTerm"] - d["physicalTerm"])) < 1e-14
        assert "reference" in d["termBreakdown"]
        rep.to_json()
        rows.append((a, rep))
    path = tmp_path / "sweep.csv"
    write_sweep_csv(path, rows)
    with open(path, newline="") as fh:
        table = list(csv.reader(fh))
    assert table[0] == [
        "a_x", "a_y", "a_z", "E", "refTerm", "physTerm", "criticalFraction"
    ]
    assert len(table) == 3
    assert abs(float(table[1][3]) - rows[0][1].E) < 1e-12


def test_mesh_mismatch_rejected(flat3):
    bd, emb = flat3
    small = icosphere(2)
    bd2 = extract_boundary_data(provider_flat(), 1.0, mesh=small)
    with pytest.raises(EnergyError):
        energy(
            SurfaceData.from_embedding(emb),
            SurfaceData.from_boundary(bd2),
            make_observer(emb, np.array([0.0, 0.0, 1.0])),
        )
