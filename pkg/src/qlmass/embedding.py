"""Isometric embedding of metric spheres into Euclidean 3-space.

Positions are parameterized by real spherical-harmonic coefficients on the
parameterization sphere and fitted to the prescribed edge lengths with a
damped Gauss-Newton iteration.  The converged shape is gauge-fixed
(centroid at the origin, principal axes aligned, deterministic signs) so
repeated runs produce bitwise-comparable output.
"""

import numpy as np
from scipy import linalg, special

from .operators import OperatorSet, SurfaceMetric


class EmbeddingError(RuntimeError):
    """Raised when the embedding iteration fails to converge."""


def real_harmonic_basis(points, degree):
    """Real orthonormal spherical harmonics up to `degree`, sampled at unit
    vectors `points`; returns a (V, (degree+1)^2) matrix."""
    points = np.asarray(points, dtype=float)
    r = np.linalg.norm(points, axis=1)
    theta = np.arccos(np.clip(points[:, 2] / r, -1.0, 1.0))
    phi = np.arctan2(points[:, 1], points[:, 0])
    cols = []
    for n in range(degree + 1):
        ynm = special.sph_harm_y(n, np.arange(0, n + 1), theta[:, None], phi[:, None])
        cols.append(ynm[:, 0].real)
        for m in range(1, n + 1):
            s = np.sqrt(2.0) * (-1.0) ** m
            cols.append(s * ynm[:, m].real)
            cols.append(s * ynm[:, m].imag)
    return np.column_stack(cols)


def embeddability_check(ops):
    """Convexity precondition for a well-posed isometric embedding.

    Returns (ok, min_curvature): ok is True when the discrete Gauss
    curvature is positive at every vertex.
    """
    kappa = ops.gauss_curvature
    return bool(np.all(kappa > 0.0)), float(kappa.min())


def gauge_fix(positions, weights):
    """Remove the Euclidean motion ambiguity deterministically.

    Weighted centroid moves to the origin; axes align with the principal
    directions of the weighted second-moment tensor; each axis sign is set
    by the weighted third moment (falling back to the first off-axis
    vertex), and handedness is restored last.
    """
    w = weights / weights.sum()
    x = positions - (w @ positions)
    moment = x.T @ (x * w[:, None])
    eigval, eigvec = np.linalg.eigh(moment)
    # descending principal order
    R = eigvec[:, ::-1]
    y = x @ R
    signs = np.ones(3)
    for k in range(3):
        skew = w @ y[:, k] ** 3
        if abs(skew) > 1e-4 * (w @ np.abs(y[:, k]) ** 3 + 1e-300):
            signs[k] = np.sign(skew)
        else:
            nz = np.flatnonzero(np.abs(y[:, k]) > 1e-9)
            if len(nz):
                signs[k] = np.sign(y[nz[0], k])
    y *= signs
    # restore right-handedness by flipping the least-constrained axis
    if np.linalg.det(R) * np.prod(signs) < 0:
        y[:, 2] *= -1.0
    return y


class EmbeddingResult:
    """Converged embedding with its derived extrinsic reference data.

    Attributes
    ----------
    positions : (V, 3) gauge-fixed vertex positions.
    times : (V,) time coordinates (constant `time_offset` for solved
        embeddings; general for file-supplied ones).
    mean_curvature : (V,) discrete mean curvature of the embedded surface.
    normals : (V, 3) outward unit normals.
    defect_l2 : RMS relative edge-length mismatch against the target metric.
    defect_max : max relative edge-length mismatch.
    iterations : Gauss-Newton iterations used.
    """

    def __init__(self, mesh, positions, defect_l2, iterations,
                 times=None, time_offset=0.0, target_metric=None):
        self.mesh = mesh
        self.positions = positions
        self.defect_l2 = defect_l2
        self.residual = defect_l2
        self.iterations = iterations
        self.time_offset = float(time_offset)
        if times is None:
            times = np.full(len(positions), self.time_offset)
        self.times = np.asarray(times, dtype=float)
        self._derive()
        if target_metric is not None:
            self.defect_max = self.consistency_residual(target_metric)
        else:
            self.defect_max = defect_l2

    def _derive(self):
        mesh, pos = self.mesh, self.positions
        self.achieved_metric = SurfaceMetric.from_positions(mesh, pos)
        self.ops = OperatorSet(mesh, self.achieved_metric)
        tri = pos[mesh.faces]
        fnorm = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        vnorm = np.zeros_like(pos)
        for a in range(3):
            np.add.at(vnorm, mesh.faces[:, a], fnorm)
        vnorm /= np.linalg.norm(vnorm, axis=1, keepdims=True)
        self.normals = vnorm
        lap = np.column_stack([self.ops.laplace(pos[:, k]) for k in range(3)])
        self.mean_curvature = -np.einsum("vk,vk->v", lap, vnorm)

    def consistency_residual(self, metric):
        """Max relative deviation of embedded edge lengths from a metric."""
        return float(np.max(
            np.abs(self.achieved_metric.edge_lengths - metric.edge_lengths)
            / metric.edge_lengths
        ))

    def linear_consistency_residual(self, a):
        """Residual of the identity laplace(a.x) = -H0 <normal, a> on the
        embedded surface; returns the per-vertex field."""
        a = np.asarray(a, dtype=float)
        u = self.positions @ a
        return self.ops.laplace(u) + self.mean_curvature * (self.normals @ a)


def embed_metric(mesh, metric, degree=16, tol=1e-8, max_iterations=200,
                 initial_positions=None):
    """Fit vertex positions in R^3 whose edge lengths match `metric`.

    Parameters
    ----------
    mesh : SurfaceMesh with genus 0.
    metric : SurfaceMetric of target edge lengths.
    degree : spherical-harmonic cutoff for the position field.
    tol : convergence threshold on the RMS relative edge residual.
    max_iterations : damped Gauss-Newton iteration cap.
    initial_positions : optional (V, 3) warm start; default is the
        area-matched scaling of the parameterization sphere.
    """
    if mesh.genus != 0:
        raise EmbeddingError("only genus-0 surfaces admit this embedding")
    B = real_harmonic_basis(mesh.vertices, degree)
    lengths = metric.edge_lengths
    scale = float(np.mean(lengths))
    ei, ej = mesh.edges[:, 0], mesh.edges[:, 1]
    dB = B[ei] - B[ej]

    if initial_positions is None:
        param_len = np.linalg.norm(
            mesh.vertices[ei] - mesh.vertices[ej], axis=1
        )
        s = np.median(lengths / param_len)
        initial_positions = s * mesh.vertices
    coeffs, *_ = np.linalg.lstsq(B, initial_positions, rcond=None)

    def residual(c):
        d = dB @ c
        norms = np.linalg.norm(d, axis=1)
        return d, norms, (norms - lengths) / scale

    lam = 1e-6
    d, norms, r = residual(coeffs)
    cost = float(r @ r)
    n_basis = B.shape[1]
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        rms = np.sqrt(cost / len(r))
        if rms < tol:
            break
        unit = d / norms[:, None]
        # J[(e), (k, m)] = unit[e, k] * dB[e, m] / scale
        JtJ = np.zeros((3 * n_basis, 3 * n_basis))
        Jtr = np.zeros(3 * n_basis)
        for k in range(3):
            wk = dB * unit[:, k, None]
            Jtr[k * n_basis:(k + 1) * n_basis] = wk.T @ r
            for k2 in range(k, 3):
                wk2 = dB * unit[:, k2, None]
                block = wk.T @ wk2
                JtJ[k * n_basis:(k + 1) * n_basis,
                    k2 * n_basis:(k2 + 1) * n_basis] = block
                if k2 != k:
                    JtJ[k2 * n_basis:(k2 + 1) * n_basis,
                        k * n_basis:(k + 1) * n_basis] = block.T
        JtJ /= scale**2
        Jtr /= scale
        accepted = False
        for _ in range(40):
            A = JtJ + lam * np.diag(np.maximum(np.diag(JtJ), 1e-12))
            try:
                step = linalg.cho_solve(linalg.cho_factor(A), -Jtr)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            trial = coeffs + step.reshape(3, n_basis).T
            d_t, norms_t, r_t = residual(trial)
            cost_t = float(r_t @ r_t)
            if cost_t < cost:
                coeffs, d, norms, r, cost = trial, d_t, norms_t, r_t, cost_t
                lam = max(lam / 3.0, 1e-12)
                accepted = True
                break
            lam *= 4.0
        if not accepted:
            break
    else:
        iterations = max_iterations

    positions = B @ coeffs
    rms = np.sqrt(cost / len(r))
    if rms >= tol:
        # the band-limited least-squares floor is above tol: polish with a
        # sparse Gauss-Newton step over the free vertex positions
        positions, rms = _polish_positions(
            mesh, lengths, positions, scale, tol, max_iterations
        )
    if rms >= tol:
        raise EmbeddingError(
            f"no convergence after {iterations} iterations (rms {rms:.3e})"
        )
    areas = OperatorSet(
        mesh, SurfaceMetric.from_positions(mesh, positions)
    ).vertex_areas
    positions = gauge_fix(positions, areas)
    return EmbeddingResult(mesh, positions, rms, iterations,
                           target_metric=metric)


def align_embedding(emb, target_positions):
    """Rigidly move an embedding onto target vertex positions (orthogonal
    Procrustes plus translation); used to express observers in the
    coordinate frame of the physical data."""
    src = emb.positions - emb.positions.mean(axis=0)
    tgt = np.asarray(target_positions, dtype=float)
    tc = tgt.mean(axis=0)
    u, _, vt = np.linalg.svd(src.T @ (tgt - tc))
    rot = u @ vt
    if np.linalg.det(rot) < 0:
        u[:, -1] *= -1.0
        rot = u @ vt
    moved = src @ rot + tc
    return EmbeddingResult(emb.mesh, moved, emb.defect_l2, emb.iterations,
                           times=emb.times)


def _polish_positions(mesh, lengths, positions, scale, tol, max_iterations):
    """Damped Gauss-Newton over all vertex coordinates, starting from the
    spectral solution; the sparse Jacobian has one row per edge."""
    from scipy.sparse import coo_matrix
    from scipy.sparse.linalg import lsqr

    ei, ej = mesh.edges[:, 0], mesh.edges[:, 1]
    n = mesh.n_vertices
    x = positions.copy()
    rms = np.inf
    for _ in range(max_iterations):
        d = x[ei] - x[ej]
        norms = np.linalg.norm(d, axis=1)
        r = (norms - lengths) / scale
        rms = np.sqrt(np.mean(r**2))
        if rms < 0.1 * tol:
            break
        unit = d / norms[:, None]
        rows = np.repeat(np.arange(len(ei)), 6)
        cols = np.concatenate(
            [np.stack([3 * ei + k for k in range(3)], axis=1),
             np.stack([3 * ej + k for k in range(3)], axis=1)], axis=1
        ).ravel()
        vals = np.concatenate([unit, -unit], axis=1).ravel() / scale
        J = coo_matrix((vals, (rows, cols)), shape=(len(ei), 3 * n)).tocsr()
        step = lsqr(J, -r, damp=1e-10, atol=1e-14, btol=1e-14,
                    iter_lim=400)[0]
        x = x + step.reshape(n, 3)
    d = x[ei] - x[ej]
    rms = np.sqrt(np.mean(((np.linalg.norm(d, axis=1) - lengths) / scale) ** 2))
    return x, rms


class ReferenceSurfaceData:
    """Extrinsic reference quantities of an embedded convex surface.

    H0 is the mean curvature field (equal to the mean curvature vector
    norm on a time slice); nu_hat the outward unit normal field.
    """

    def __init__(self, H0, nu_hat):
        if np.min(H0) <= 0.0:
            raise EmbeddingError(
                f"non-convex image: H0 <= 0 at vertex {int(np.argmin(H0))}"
            )
        self.H0 = np.asarray(H0, dtype=float)
        self.nu_hat = np.asarray(nu_hat, dtype=float)


def reference_data(emb):
    """Reference mean curvature and normals of a converged embedding."""
    return ReferenceSurfaceData(emb.mean_curvature, emb.normals)


def self_intersection_check(positions, faces):
    """True when no two non-adjacent triangles intersect.

    Candidate pairs come from a KD-tree radius query on face centroids;
    each candidate pair is tested edge-against-triangle both ways.
    """
    from scipy.spatial import cKDTree

    tri = positions[faces]
    cent = tri.mean(axis=1)
    rad = np.linalg.norm(tri - cent[:, None, :], axis=2).max(axis=1)
    tree = cKDTree(cent)
    pairs = tree.query_pairs(2.0 * rad.max(), output_type="ndarray")
    share = np.array([
        len(set(faces[i]) & set(faces[j])) > 0 for i, j in pairs
    ])
    pairs = pairs[~share]
    for i, j in pairs:
        if np.linalg.norm(cent[i] - cent[j]) > rad[i] + rad[j]:
            continue
        if _tri_tri_intersect(tri[i], tri[j]):
            return False
    return True


def _seg_tri_intersect(p, q, tri):
    # Moeller-Trumbore against segment pq
    e1, e2 = tri[1] - tri[0], tri[2] - tri[0]
    d = q - p
    h = np.cross(d, e2)
    a = e1 @ h
    if abs(a) < 1e-15:
        return False
    s = p - tri[0]
    u = (s @ h) / a
    if u < 0.0 or u > 1.0:
        return False
    qv = np.cross(s, e1)
    v = (d @ qv) / a
    if v < 0.0 or u + v > 1.0:
        return False
    t = (e2 @ qv) / a
    return 0.0 <= t <= 1.0


def _tri_tri_intersect(t1, t2):
    for a, b in ((0, 1), (1, 2), (2, 0)):
        if _seg_tri_intersect(t1[a], t1[b], t2):
            return True
        if _seg_tri_intersect(t2[a], t2[b], t1):
            return True
    return False


# -- embedding file I/O -------------------------------------------------


def write_embedding(path, result):
    """One line per vertex: `t x y z` in mesh vertex order."""
    with open(path, "w") as fh:
        for t, p in zip(result.times, result.positions):
            fh.write(f"{t:.17g} {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")


def read_embedding(path, mesh):
    """Returns (times, positions) read from per-vertex `t x y z` lines."""
    data = np.loadtxt(path, dtype=float, ndmin=2)
    if data.shape != (mesh.n_vertices, 4):
        raise EmbeddingError(
            f"{path}: expected {mesh.n_vertices} lines of `t x y z`, "
            f"got shape {data.shape}"
        )
    return data[:, 0].copy(), data[:, 1:].copy()
