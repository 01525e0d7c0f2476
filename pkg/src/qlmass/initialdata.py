"""Analytic initial data sets (g, k) and their derived quantities.

Providers are closed-form samplers over R^3; curvature-level quantities
(scalar curvature, sphere mean curvature, constraint densities) come from
fourth-order central finite differences of the samplers.  Boundary-data
extraction pulls the quintuple (sigma, H, trK, alpha) back to an icosphere
coordinate sphere for the energy machinery.
"""

import numpy as np

from .mesh import icosphere
from .operators import SurfaceGeometry, SurfaceMetric

FD_STEP = 1e-3


class InitialDataError(ValueError):
    """Raised for out-of-domain evaluation or invalid provider input."""


class InitialDataSample:
    """Closed-form initial data (g, k) with asymptotic decay order tau."""

    name = "abstract"
    decay_order = 1.0

    def metric(self, x):
        """Metric tensor g_ij at points x, shape (N, 3, 3)."""
        raise NotImplementedError

    def extrinsic(self, x):
        """Extrinsic curvature k_ij at points x, shape (N, 3, 3)."""
        raise NotImplementedError

    def _check_domain(self, x):
        pass

    # -- finite-difference machinery ------------------------------------

    def _fd_scale(self, x):
        r = np.linalg.norm(x, axis=-1)
        return FD_STEP * np.maximum(1.0, r)

    def metric_derivatives(self, x):
        """d_c g_ij by fourth-order central differences, shape (N, 3, 3, 3)
        indexed [point, c, i, j]."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        h = self._fd_scale(x)
        out = np.empty((len(x), 3, 3, 3))
        for c in range(3):
            e = np.zeros(3)
            e[c] = 1.0
            gp1 = self.metric(x + h[:, None] * e)
            gm1 = self.metric(x - h[:, None] * e)
            gp2 = self.metric(x + 2.0 * h[:, None] * e)
            gm2 = self.metric(x - 2.0 * h[:, None] * e)
            out[:, c] = (8.0 * (gp1 - gm1) - (gp2 - gm2)) / (12.0 * h)[:, None, None]
        return out

    def christoffels(self, x):
        """Gamma^a_bc at points x, shape (N, 3, 3, 3) indexed [point, a, b, c]."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        dg = self.metric_derivatives(x)
        ginv = np.linalg.inv(self.metric(x))
        # Gamma_{d,bc} = (d_b g_dc + d_c g_db - d_d g_bc) / 2
        low = 0.5 * (
            np.einsum("nbdc->ndbc", dg) + np.einsum("ncdb->ndbc", dg) - dg
        )
        return np.einsum("nad,ndbc->nabc", ginv, low)

    def scalar_curvature(self, x):
        """Scalar curvature of g by differencing the Christoffel symbols."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        h = self._fd_scale(x)
        dgamma = np.empty((len(x), 3, 3, 3, 3))
        for c in range(3):
            e = np.zeros(3)
            e[c] = 1.0
            gp1 = self.christoffels(x + h[:, None] * e)
            gm1 = self.christoffels(x - h[:, None] * e)
            gp2 = self.christoffels(x + 2.0 * h[:, None] * e)
            gm2 = self.christoffels(x - 2.0 * h[:, None] * e)
            dgamma[:, c] = (8.0 * (gp1 - gm1) - (gp2 - gm2)) / (
                12.0 * h
            )[:, None, None, None]
        gam = self.christoffels(x)
        ginv = np.linalg.inv(self.metric(x))
        # Ricci_bc = d_a Gamma^a_bc - d_b Gamma^a_ac + G^a_ad G^d_bc - G^a_cd G^d_ab
        ricci = (
            np.einsum("naabc->nbc", dgamma)
            - np.einsum("nbaac->nbc", dgamma)
            + np.einsum("naad,ndbc->nbc", gam, gam)
            - np.einsum("nacd,ndab->nbc", gam, gam)
        )
        return np.einsum("nbc,nbc->n", ginv, ricci)

    def sphere_normal(self, x):
        """Outward g-unit normal (upper index) of the coordinate sphere
        through each point."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = x / np.linalg.norm(x, axis=1, keepdims=True)
        ginv = np.linalg.inv(self.metric(x))
        nu = np.einsum("nij,nj->ni", ginv, n)
        norm = np.sqrt(np.einsum("ni,ni->n", nu, n))
        return nu / norm[:, None]

    def sphere_mean_curvature(self, x):
        """Mean curvature H = div_g(nu) of the coordinate sphere through x."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        h = self._fd_scale(x)

        def flux(y):
            # sqrt(det g) nu^i
            s = np.sqrt(np.linalg.det(self.metric(y)))
            return s[:, None] * self.sphere_normal(y)

        div = np.zeros(len(x))
        for c in range(3):
            e = np.zeros(3)
            e[c] = 1.0
            fp1 = flux(x + h[:, None] * e)[:, c]
            fm1 = flux(x - h[:, None] * e)[:, c]
            fp2 = flux(x + 2.0 * h[:, None] * e)[:, c]
            fm2 = flux(x - 2.0 * h[:, None] * e)[:, c]
            div += (8.0 * (fp1 - fm1) - (fp2 - fm2)) / (12.0 * h)
        return div / np.sqrt(np.linalg.det(self.metric(x)))

    # -- constraint quantities -------------------------------------------

    def constraint_fields(self, x):
        """Energy/momentum densities mu = (R + (Tr k)^2 - |k|^2)/2 and
        J = div(k - (Tr k) g); returns (mu, J) with J lower-index."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        g = self.metric(x)
        ginv = np.linalg.inv(g)
        k = self.extrinsic(x)
        trk = np.einsum("nij,nij->n", ginv, k)
        ksq = np.einsum("nia,njb,nij,nab->n", ginv, ginv, k, k)
        mu = 0.5 * (self.scalar_curvature(x) + trk**2 - ksq)

        def pi(y):
            gy = self.metric(y)
            ky = self.extrinsic(y)
            trky = np.einsum("nij,nij->n", np.linalg.inv(gy), ky)
            return ky - trky[:, None, None] * gy

        h = self._fd_scale(x)
        dpi = np.empty((len(x), 3, 3, 3))
        for c in range(3):
            e = np.zeros(3)
            e[c] = 1.0
            p1 = pi(x + h[:, None] * e)
            m1 = pi(x - h[:, None] * e)
            p2 = pi(x + 2.0 * h[:, None] * e)
            m2 = pi(x - 2.0 * h[:, None] * e)
            dpi[:, c] = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)[:, None, None]
        gam = self.christoffels(x)
        pix = pi(x)
        # J_i = g^{ab}(d_a pi_bi - G^c_ab pi_ci - G^c_ai pi_bc)
        term1 = np.einsum("nab,nabi->ni", ginv, dpi)
        term2 = np.einsum("nab,ncab,nci->ni", ginv, gam, pix)
        term3 = np.einsum("nab,ncai,nbc->ni", ginv, gam, pix)
        return mu, term1 - term2 - term3

    def dec_margin(self, x):
        """Pointwise mu - |J|_g (nonnegative when the dominant energy
        condition holds)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        mu, J = self.constraint_fields(x)
        ginv = np.linalg.inv(self.metric(x))
        jn = np.sqrt(np.maximum(np.einsum("nij,ni,nj->n", ginv, J, J), 0.0))
        return mu - jn

    def dec_satisfied(self, radii=(5.0, 10.0, 20.0), n_dirs=32, tol=1e-6):
        """DEC classifier on sample shells."""
        dirs = fibonacci_directions(n_dirs)
        pts = np.concatenate([r * dirs for r in radii])
        return bool(self.dec_margin(pts).min() >= -tol)


def fibonacci_directions(n, rotation=0.0):
    """Fibonacci lattice of n nearly uniform unit vectors."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    phi = np.pi * (1.0 + np.sqrt(5.0)) * i + rotation
    s = np.sqrt(1.0 - z**2)
    return np.column_stack([s * np.cos(phi), s * np.sin(phi), z])


# -- providers -----------------------------------------------------------


class FlatData(InitialDataSample):
    """Euclidean slice: g = delta, k = 0."""

    name = "flat"
    decay_order = 1.0

    def metric(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.broadcast_to(np.eye(3), (len(x), 3, 3)).copy()

    def extrinsic(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.zeros((len(x), 3, 3))

    def constraint_fields(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.zeros(len(x)), np.zeros((len(x), 3))


class UniformExpansionData(InitialDataSample):
    """Flat metric with k = c * delta; exercises the Tr k terms alone."""

    decay_order = 1.0

    def __init__(self, c=1.0):
        self.c = float(c)
        self.name = "uniform_expansion"

    def metric(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.broadcast_to(np.eye(3), (len(x), 3, 3)).copy()

    def extrinsic(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.c * np.broadcast_to(np.eye(3), (len(x), 3, 3)).copy()


class SchwarzschildData(InitialDataSample):
    """Time-symmetric isotropic slice: g = psi^4 delta, psi = 1 + m/2r."""

    decay_order = 1.0

    def __init__(self, mass):
        if mass <= 0:
            raise InitialDataError("mass must be positive")
        self.mass = float(mass)
        self.name = "schwarzschild"

    def conformal_factor(self, r):
        return 1.0 + self.mass / (2.0 * np.asarray(r, dtype=float))

    def conformal_factor_derivative(self, r):
        return -self.mass / (2.0 * np.asarray(r, dtype=float) ** 2)

    def _check_domain(self, x):
        r = np.linalg.norm(np.atleast_2d(x), axis=1)
        if np.any(r < 1e-12):
            raise InitialDataError("evaluation at r = 0")

    def metric(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        self._check_domain(x)
        r = np.linalg.norm(x, axis=1)
        psi4 = self.conformal_factor(r) ** 4
        return psi4[:, None, None] * np.eye(3)

    def extrinsic(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.zeros((len(x), 3, 3))

    def constraint_fields(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        self._check_domain(x)
        return np.zeros(len(x)), np.zeros((len(x), 3))


class BowenYorkData(InitialDataSample):
    """Flat metric with the momentum-carrying extrinsic curvature
    k_ij = (3/2r^2)(P_i n_j + P_j n_i - (delta_ij - n_i n_j) P.n)."""

    decay_order = 1.0

    def __init__(self, momentum):
        momentum = np.asarray(momentum, dtype=float)
        if momentum.shape != (3,) or not np.all(np.isfinite(momentum)):
            raise InitialDataError("momentum must be a finite 3-vector")
        self.momentum = momentum
        self.name = "bowen_york"

    def _check_domain(self, x):
        r = np.linalg.norm(np.atleast_2d(x), axis=1)
        if np.any(r < 1e-12):
            raise InitialDataError("evaluation at r = 0")

    def metric(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        self._check_domain(x)
        return np.broadcast_to(np.eye(3), (len(x), 3, 3)).copy()

    def extrinsic(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        self._check_domain(x)
        r = np.linalg.norm(x, axis=1)
        n = x / r[:, None]
        P = self.momentum
        pn = n @ P
        eye = np.eye(3)
        sym = P[None, :, None] * n[:, None, :] + P[None, None, :] * n[:, :, None]
        proj = eye[None] - n[:, :, None] * n[:, None, :]
        k = (3.0 / (2.0 * r**2))[:, None, None] * (
            sym - proj * pn[:, None, None]
        )
        return k


def provider_flat():
    return FlatData()


def provider_schwarzschild(mass):
    return SchwarzschildData(mass)


def provider_bowen_york(momentum):
    return BowenYorkData(momentum)


# -- boundary-data extraction ---------------------------------------------


class CovectorField:
    """Tangential covector on a coordinate-sphere boundary, stored with
    ambient (lower-index) components per vertex."""

    def __init__(self, ambient):
        self.ambient = np.asarray(ambient, dtype=float)

    def edge_values(self, mesh, positions):
        """Pairings with oriented mesh edges (low vertex to high vertex),
        by the trapezoid rule along the chord."""
        i, j = mesh.edges[:, 0], mesh.edges[:, 1]
        chord = positions[j] - positions[i]
        avg = 0.5 * (self.ambient[i] + self.ambient[j])
        return np.einsum("ek,ek->e", avg, chord)

    @classmethod
    def zero(cls, n_vertices):
        return cls(np.zeros((n_vertices, 3)))


class QuasiLocalBoundaryData:
    """Boundary quintuple (sigma, H, trK, alpha) on a surface mesh.

    H and trK are per-vertex; alpha is the normal-bundle connection 1-form
    in the slice gauge, alpha(X) = -k(X, nu).
    """

    def __init__(self, geom, H, trk, alpha, positions=None, normals=None,
                 name=""):
        self.geom = geom
        self.H = np.asarray(H, dtype=float)
        self.trk = np.asarray(trk, dtype=float)
        self.alpha = alpha
        self.positions = positions
        self.normals = normals
        self.name = name
        bad = self.H <= np.abs(self.trk)
        if np.any(bad):
            raise InitialDataError(
                "mean curvature vector not outward spacelike: H <= |trK| at "
                f"vertex {int(np.argmax(bad))}"
            )

    @property
    def field_norm(self):
        """|H_vec| = sqrt(H^2 - trK^2), the mean curvature vector norm."""
        return np.sqrt(self.H**2 - self.trk**2)

    def alpha_edge_values(self):
        if self.positions is None:
            return self._alpha_edge_values
        return self.alpha.edge_values(self.geom.mesh, self.positions)


def extract_boundary_data(data, radius, mesh=None, level=4):
    """Pull back (sigma, H, trK, alpha) to a coordinate sphere of the
    given radius, meshed by an icosphere."""
    if mesh is None:
        mesh = icosphere(level)
    verts = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True)
    X = radius * verts

    # sigma: midpoint-metric chord lengths
    i, j = mesh.edges[:, 0], mesh.edges[:, 1]
    chord = X[j] - X[i]
    mid = 0.5 * (X[i] + X[j])
    gmid = data.metric(mid)
    lengths = np.sqrt(np.einsum("ei,eij,ej->e", chord, gmid, chord))
    geom = SurfaceGeometry(mesh, SurfaceMetric(mesh, lengths))

    H = data.sphere_mean_curvature(X)
    g = data.metric(X)
    ginv = np.linalg.inv(g)
    k = data.extrinsic(X)
    nu = data.sphere_normal(X)
    trk_full = np.einsum("nij,nij->n", ginv, k)
    knn = np.einsum("nij,ni,nj->n", k, nu, nu)
    trk = trk_full - knn

    # alpha_nu(X) = -k(X, nu), tangentially projected (lower index)
    a = -np.einsum("nij,nj->ni", k, nu)
    nu_low = np.einsum("nij,nj->ni", g, nu)
    a = a - np.einsum("ni,ni->n", a, nu)[:, None] * nu_low
    return QuasiLocalBoundaryData(
        geom, H, trk, CovectorField(a), positions=X, normals=nu,
        name=f"{data.name}_r{radius:g}",
    )


# -- ADM surface integrals --------------------------------------------------


def _sphere_quadrature(n_theta=48, n_phi=96):
    nodes, weights = np.polynomial.legendre.leggauss(n_theta)
    theta_w = weights
    cos_t = nodes
    sin_t = np.sqrt(1.0 - cos_t**2)
    phi = 2.0 * np.pi * (np.arange(n_phi) + 0.5) / n_phi
    phi_w = 2.0 * np.pi / n_phi
    dirs = np.stack(
        [
            np.outer(sin_t, np.cos(phi)),
            np.outer(sin_t, np.sin(phi)),
            np.outer(cos_t, np.ones(n_phi)),
        ],
        axis=-1,
    ).reshape(-1, 3)
    w = (np.outer(theta_w, np.full(n_phi, phi_w))).ravel()
    return dirs, w


def adm_integrals(data, radii):
    """ADM energy and momentum surface integrals per radius, with a 1/r
    Richardson extrapolation across the given radii."""
    radii = sorted(radii)
    dirs, w = _sphere_quadrature()
    energies, momenta = [], []
    for R in radii:
        X = R * dirs
        dg = data.metric_derivatives(X)
        # (d_j g_ij - d_i g_jj) n_i over the Euclidean sphere
        integrand = np.einsum("njij->ni", dg) - np.einsum("nijj->ni", dg)
        flux = np.einsum("ni,ni->n", integrand, dirs)
        energies.append(float((w * flux).sum() * R**2 / (16.0 * np.pi)))
        g = data.metric(X)
        k = data.extrinsic(X)
        ginv = np.linalg.inv(g)
        trk = np.einsum("nij,nij->n", ginv, k)
        pi = k - trk[:, None, None] * g
        p_flux = np.einsum("nij,nj->ni", pi, dirs)
        momenta.append((w[:, None] * p_flux).sum(axis=0) * R**2 / (8.0 * np.pi))
    energies = np.array(energies)
    momenta = np.array(momenta)
    report = {
        "radii": list(radii),
        "E_r": energies.tolist(),
        "P_r": momenta.tolist(),
        "warnings": [],
    }
    if len(radii) >= 2:
        # least squares fit E(r) = E_inf + c / r
        A = np.column_stack([np.ones(len(radii)), 1.0 / np.asarray(radii)])
        coefs, *_ = np.linalg.lstsq(A, energies, rcond=None)
        report["E"] = float(coefs[0])
        pc = np.linalg.lstsq(A, momenta, rcond=None)[0]
        report["P"] = pc[0].tolist()
        diffs = np.abs(np.diff(energies))
        if len(diffs) >= 2 and np.any(np.diff(diffs) > 0):
            report["warnings"].append("non-monotone energy convergence")
    else:
        report["E"] = float(energies[-1])
        report["P"] = momenta[-1].tolist()
    return report


def fit_decay_order(data, radii=(8.0, 16.0, 32.0), n_dirs=16):
    """Fitted decay exponents (tau from |g - delta|, tau from |k| minus 1)
    on sample shells; entries are None for identically vanishing fields."""
    dirs = fibonacci_directions(n_dirs)
    g_dev, k_mag = [], []
    for r in radii:
        X = r * dirs
        g_dev.append(np.abs(data.metric(X) - np.eye(3)).max())
        k_mag.append(np.abs(data.extrinsic(X)).max())
    logs = np.log(np.asarray(radii))

    def fit(vals):
        vals = np.asarray(vals)
        if np.all(vals < 1e-14):
            return None
        slope = np.polyfit(logs, np.log(vals), 1)[0]
        return float(-slope)

    tau_g = fit(g_dev)
    tau_k = fit(k_mag)
    return tau_g, None if tau_k is None else tau_k - 1.0


# -- file provider ----------------------------------------------------------


def write_boundary_fields(path, bd):
    """Per-vertex table `H trK alpha_1 alpha_2`; alpha components are taken
    against the unit polar/azimuthal coordinate vectors at each vertex of
    the parameterization sphere, scaled by the ambient radius."""
    mesh = bd.geom.mesh
    e_th, e_ph = _sphere_frames(mesh.vertices)
    amb = bd.alpha.ambient if bd.alpha is not None else np.zeros(
        (mesh.n_vertices, 3)
    )
    scale = np.linalg.norm(bd.positions, axis=1) if bd.positions is not None \
        else np.ones(mesh.n_vertices)
    a1 = np.einsum("ni,ni->n", amb, e_th) * scale
    a2 = np.einsum("ni,ni->n", amb, e_ph) * scale
    with open(path, "w") as fh:
        for vals in zip(bd.H, bd.trk, a1, a2):
            fh.write(" ".join(f"{v:.17g}" for v in vals) + "\n")


def read_boundary_fields(path, geom, radius=None):
    """Inverse of write_boundary_fields; reconstructs ambient alpha on the
    coordinate sphere of the given radius (default: unit sphere)."""
    mesh = geom.mesh
    data = np.loadtxt(path, dtype=float, ndmin=2)
    if data.shape != (mesh.n_vertices, 4):
        raise InitialDataError(
            f"{path}: expected {mesh.n_vertices} rows of `H trK a1 a2`"
        )
    e_th, e_ph = _sphere_frames(mesh.vertices)
    if radius is None:
        radius = 1.0
    amb = (data[:, 2, None] * e_th + data[:, 3, None] * e_ph) / radius
    verts = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True)
    return QuasiLocalBoundaryData(
        geom, data[:, 0], data[:, 1], CovectorField(amb),
        positions=radius * verts, name="file",
    )


def _sphere_frames(vertices):
    """Unit polar and azimuthal coordinate vectors at unit-sphere points."""
    v = vertices / np.linalg.norm(vertices, axis=1, keepdims=True)
    z = np.array([0.0, 0.0, 1.0])
    e_ph = np.cross(z, v)
    n = np.linalg.norm(e_ph, axis=1)
    polar = n < 1e-12
    if np.any(polar):
        e_ph[polar] = np.array([0.0, 1.0, 0.0])
        n[polar] = 1.0
    e_ph /= n[:, None]
    e_th = np.cross(e_ph, v)
    return e_th, e_ph
