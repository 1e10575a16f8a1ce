"""Flattening a 3D face patch to a planar domain.

Three stages: a free-boundary conformal parameterization (natural boundary,
two pinned vertices to fix the similarity group), orthographic projection of
the outer boundary after PCA pose normalization, and a corrective
least-squares quasi-conformal solve that pins the outer boundary to the
projected targets so the flattened face keeps its recognizable shape.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .beltrami import BeltramiField, wirtinger_from_corners
from .errors import MeshTopologyError, ProjectionFoldError
from .mesh import UVMesh, cotangent_matrix
from .solver import Constraints, face_gradient_operators, solve_constrained

logger = logging.getLogger(__name__)

# cotangent weights clamped to this magnitude for conditioning
COT_CLAMP = 10.0


def _require_disk_topology(mesh):
    loops = mesh.boundary_loops()  # raises for closed meshes
    if mesh.genus() != 0:
        raise MeshTopologyError(f"not disk topology: genus {mesh.genus()}")
    return loops


def local_face_frames(mesh):
    """Isometric per-face 2D coordinates of a 3D mesh's corners, shape (m, 3, 2).

    Each triangle is laid out with its first edge along +x; lengths and angles
    are preserved exactly, orientation is positive.
    """
    c = mesh.face_corners()
    e1 = c[:, 1] - c[:, 0]
    e2 = c[:, 2] - c[:, 0]
    l1 = np.linalg.norm(e1, axis=1)
    xhat = e1 / l1[:, None]
    proj = (e2 * xhat).sum(axis=1)
    yvec = e2 - proj[:, None] * xhat
    h = np.linalg.norm(yvec, axis=1)
    out = np.zeros((mesh.n_faces, 3, 2))
    out[:, 1, 0] = l1
    out[:, 2, 0] = proj
    out[:, 2, 1] = h
    return out


def _area_matrix(mesh, corners):
    """Skew matrix U with image area = u^T (2U) v for image coordinates (u, v)."""
    G, areas = face_gradient_operators(corners.reshape(-1, 2), np.arange(3 * mesh.n_faces).reshape(-1, 3))
    Jt = np.array([[0.0, 1.0], [-1.0, 0.0]])
    local_W = areas[:, None, None] * np.einsum("fai,ab,fbj->fij", G, Jt, G)
    n = mesh.n_vertices
    rows = np.repeat(mesh.faces, 3, axis=1).ravel()
    cols = np.tile(mesh.faces, (1, 3)).ravel()
    W = sparse.csr_matrix((local_W.ravel(), (rows, cols)), shape=(n, n))
    W.sum_duplicates()
    return 0.5 * W


def _face_cotangents(mesh):
    c = mesh.face_corners()
    cots = np.empty((mesh.n_faces, 3))
    for k in range(3):
        a = c[:, (k + 1) % 3] - c[:, k]
        b = c[:, (k + 2) % 3] - c[:, k]
        cross = np.linalg.norm(np.cross(a, b), axis=1)
        cross[cross == 0] = np.finfo(float).tiny
        cots[:, k] = (a * b).sum(axis=1) / cross
    return cots


def _chi_matrix(mesh):
    """Symmetrized authalic (Chi) energy matrix.

    Edge (i, j) is weighted by the cotangents of the angles at the edge's own
    endpoints within each incident face, divided by the squared edge length.
    """
    c = mesh.face_corners()
    n = mesh.n_vertices
    cots = np.clip(_face_cotangents(mesh), -COT_CLAMP, COT_CLAMP)
    ii, jj, vv = [], [], []
    for k in range(3):
        ka, kb = (k + 1) % 3, (k + 2) % 3
        i = mesh.faces[:, ka]
        j = mesh.faces[:, kb]
        edge2 = ((c[:, ka] - c[:, kb]) ** 2).sum(axis=1)
        w = 0.5 * (cots[:, ka] + cots[:, kb]) / edge2
        ii.extend([i, j, i, j])
        jj.extend([j, i, i, j])
        vv.extend([-w, -w, w, w])
    C = sparse.csr_matrix((np.concatenate(vv), (np.concatenate(ii), np.concatenate(jj))), shape=(n, n))
    C.sum_duplicates()
    return C


def _surface_system(mesh, lam, zeta):
    """Conformal-energy matrix of maps from the surface metric to the plane."""
    corners = local_face_frames(mesh)
    L = 0.5 * lam * cotangent_matrix(mesh, clamp=COT_CLAMP)
    if zeta != 0.0:
        L = L + zeta * _chi_matrix(mesh)
    U = lam * _area_matrix(mesh, corners)
    return sparse.bmat([[L, -U], [U, L]], format="csr")


def dncp(mesh, lam=1.0, zeta=0.0):
    """Free-boundary conformal flattening of a disk-topology surface patch.

    Minimizes lam * (Dirichlet - area) + zeta * Chi with the similarity group
    fixed by pinning two far-apart boundary vertices; for the default
    zeta = 0 this is the natural conformal parameterization.
    """
    loops = _require_disk_topology(mesh)
    N = _surface_system(mesh, lam, zeta)

    loop = np.array(loops[0])
    pts = mesh.vertices[loop]
    centroid = mesh.vertices.mean(axis=0)
    i0 = np.argmax(((pts - centroid) ** 2).sum(axis=1))
    i1 = np.argmax(((pts - pts[i0]) ** 2).sum(axis=1))
    d = np.linalg.norm(pts[i1] - pts[i0])
    cons = Constraints().pin(loop[[i0, i1]], [[0.0, 0.0], [d, 0.0]])

    image, _ = solve_constrained(N, mesh.n_vertices, cons)
    uv = UVMesh(
        image,
        mesh.faces,
        curvature=mesh.curvature,
        source=mesh,
        validate=False,
    )
    flipped = uv.flipped_faces()
    if flipped:
        logger.warning("free-boundary flattening produced %d flipped faces", flipped)
    return uv


@dataclass
class BoundaryProjection:
    """Orthographic drop of the outer boundary after PCA pose normalization."""

    indices: np.ndarray
    targets: np.ndarray
    rotation: np.ndarray  # rows are the pose axes; p_pose = rotation @ (p - center)
    center: np.ndarray

    def __iter__(self):
        return iter(zip(self.indices.tolist(), self.targets))


def pose_frame(mesh):
    """PCA pose of a roughly front-facing surface patch.

    Returns (rotation, center): rotation rows are the in-plane axes and the
    face-normal axis; signs are fixed by the mean surface normal and, for the
    first axis, by the skewness of the coordinate distribution so that the
    frame is reproducible under rigid motion.
    """
    X = mesh.vertices - mesh.vertices.mean(axis=0)
    cov = X.T @ X / len(X)
    w, vecs = np.linalg.eigh(cov)  # ascending eigenvalues
    axis3 = vecs[:, 0]
    axis1 = vecs[:, 2]

    c = mesh.face_corners()
    mean_normal = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]).sum(axis=0)
    if mean_normal @ axis3 < 0:
        axis3 = -axis3

    t = X @ axis1
    std = t.std()
    skew = (t**3).mean() / (std**3 if std > 0 else 1.0)
    if abs(skew) > 1e-3:
        if skew < 0:
            axis1 = -axis1
    else:
        # symmetric distribution: canonicalize by the dominant component
        if axis1[np.argmax(np.abs(axis1))] < 0:
            axis1 = -axis1
    axis2 = np.cross(axis3, axis1)
    R = np.vstack([axis1, axis2, axis3])
    return R, mesh.vertices.mean(axis=0)


def _polygon_self_intersects(pts):
    """Check a closed polygon for properly crossing non-adjacent segments."""
    k = len(pts)
    a = pts
    b = np.roll(pts, -1, axis=0)

    def orient(p, q, r):
        return (q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1]) - (
            q[..., 1] - p[..., 1]
        ) * (r[..., 0] - p[..., 0])

    i_idx, j_idx = np.triu_indices(k, 2)
    # the last and first segments are adjacent through the closing edge
    keep = ~((i_idx == 0) & (j_idx == k - 1))
    i_idx, j_idx = i_idx[keep], j_idx[keep]
    p1, p2 = a[i_idx], b[i_idx]
    q1, q2 = a[j_idx], b[j_idx]
    d1 = orient(p1, p2, q1)
    d2 = orient(p1, p2, q2)
    d3 = orient(q1, q2, p1)
    d4 = orient(q1, q2, p2)
    crossing = (d1 * d2 < 0) & (d3 * d4 < 0)
    return bool(crossing.any())


def project_boundary(mesh):
    """Targets m_i = (x_i, y_i) for every outer-boundary vertex, in pose frame."""
    loops = _require_disk_topology(mesh)
    R, center = pose_frame(mesh)
    loop = np.array(loops[0])
    local = (mesh.vertices[loop] - center) @ R.T
    targets = local[:, :2]
    if _polygon_self_intersects(targets):
        raise ProjectionFoldError("projected outer boundary self-intersects")
    return BoundaryProjection(indices=loop, targets=targets, rotation=R, center=center)


def parameterize(mesh, lam=1.0, zeta=0.0):
    """Full flattening pipeline: conformal flattening with a pinned boundary.

    The outer boundary is pinned to its pose-aligned orthographic projection
    and the conformal energy is minimized over the interior (and any hole
    boundaries, which stay free). The correction is a single linear solve, so
    it subsumes the free-boundary first pass; the energy lives on the surface
    metric, making the result independent of any intermediate flattening.

    The output keeps the source connectivity, carries the source's curvature
    channel, and records the pose rotation used for the boundary projection.
    """
    projection = project_boundary(mesh)
    N = _surface_system(mesh, lam, zeta)
    cons = Constraints().pin(projection.indices, projection.targets)
    image, _ = solve_constrained(N, mesh.n_vertices, cons)
    uv = UVMesh(
        image,
        mesh.faces,
        curvature=mesh.curvature,
        source=mesh,
        pose_rotation=projection.rotation,
        validate=False,
    )
    flipped = uv.flipped_faces()
    if flipped:
        logger.warning("parameterization has %d flipped faces", flipped)
    return uv


def beltrami_3d_to_uv(mesh, uv):
    """Per-face Beltrami modulus of the flattening (3D metric to UV).

    The phase depends on the per-face isometric frame choice and is therefore
    only meaningful through its modulus.
    """
    dom = local_face_frames(mesh)
    img = uv.points[uv.faces]
    fz, fzb = wirtinger_from_corners(dom, img)
    return BeltramiField(fzb / np.where(np.abs(fz) > 0, fz, np.finfo(float).tiny))


def corner_angles(corners):
    """Angles at each corner from (m, 3, d) corner arrays, radians."""
    out = np.empty(corners.shape[:2])
    for k in range(3):
        a = corners[:, (k + 1) % 3] - corners[:, k]
        b = corners[:, (k + 2) % 3] - corners[:, k]
        na = np.linalg.norm(a, axis=-1)
        nb = np.linalg.norm(b, axis=-1)
        cosang = np.clip(
            (a * b).sum(axis=-1) / np.maximum(na * nb, np.finfo(float).tiny), -1.0, 1.0
        )
        out[:, k] = np.arccos(cosang)
    return out


def angle_distortion(mesh, uv):
    """Mean absolute corner-angle difference between surface and UV, degrees."""
    a3 = corner_angles(mesh.face_corners())
    a2 = corner_angles(uv.points[uv.faces])
    return float(np.degrees(np.abs(a3 - a2).mean()))
