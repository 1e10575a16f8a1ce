"""Triangle-mesh core: containers, OBJ I/O, adjacency, normals and curvature.

Meshes are immutable after construction; every operation here is a pure
function of the mesh, so instances can be shared freely between threads.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import (
    InconsistentOrientationError,
    InvalidMeshError,
    IsolatedVertexError,
    MeshParseError,
    MeshTopologyError,
    NonManifoldEdgeError,
    NonTriangularFaceError,
)

logger = logging.getLogger(__name__)

# Faces with area below this fraction of the mean face area are degenerate.
_AREA_REL_TOL = 1e-12


def _as_vertex_array(v, dim):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != dim:
        raise InvalidMeshError(f"expected ({dim},)-vertices, got array of shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise InvalidMeshError("non-finite vertex coordinate")
    return v


def _as_face_array(f):
    f = np.asarray(f, dtype=np.int64)
    if f.size == 0:
        return f.reshape(0, 3)
    if f.ndim != 2 or f.shape[1] != 3:
        raise NonTriangularFaceError(f"faces must be vertex triples, got shape {f.shape}")
    return f


def _validate_connectivity(n_vertices, faces):
    if faces.shape[0] == 0:
        raise InvalidMeshError("mesh has no faces")
    if faces.min() < 0 or faces.max() >= n_vertices:
        raise InvalidMeshError("face index out of range")
    same = (faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 2] == faces[:, 0])
    if same.any():
        raise InvalidMeshError(f"face {int(np.nonzero(same)[0][0])} repeats a vertex")
    # Directed-edge multiplicity: any directed edge used twice means two faces
    # crossing the edge with the same orientation; an undirected edge used by
    # more than two faces is non-manifold.
    i = faces.ravel()
    j = faces[:, [1, 2, 0]].ravel()
    n = n_vertices
    eid = i * n + j
    uniq, counts = np.unique(eid, return_counts=True)
    if counts.max() > 1:
        # Distinguish non-manifold (undirected count > 2) from orientation flips.
        und = np.minimum(i, j) * n + np.maximum(i, j)
        _, und_counts = np.unique(und, return_counts=True)
        if und_counts.max() > 2:
            raise NonManifoldEdgeError("an edge is shared by more than two faces")
        raise InconsistentOrientationError("a directed edge appears in two faces")
    und = np.minimum(i, j) * n + np.maximum(i, j)
    _, und_counts = np.unique(und, return_counts=True)
    if und_counts.max() > 2:
        raise NonManifoldEdgeError("an edge is shared by more than two faces")


class TriMesh3:
    """Oriented triangle mesh embedded in 3-space.

    Parameters
    ----------
    vertices : (n, 3) float array
    faces : (m, 3) int array, counterclockwise when seen from outside
    curvature : optional (n,) per-vertex scalar channel (mean curvature H)
    normals : optional (n, 3) unit vertex normals
    """

    def __init__(self, vertices, faces, curvature=None, normals=None, validate=True):
        self.vertices = _as_vertex_array(vertices, 3)
        self.faces = _as_face_array(faces)
        if validate:
            _validate_connectivity(len(self.vertices), self.faces)
            areas = self.face_areas()
            tol = _AREA_REL_TOL * max(areas.mean(), np.finfo(float).tiny)
            if (areas <= tol).any():
                raise InvalidMeshError(f"face {int(np.argmin(areas))} has (near-)zero area")
        self.curvature = None if curvature is None else np.asarray(curvature, dtype=np.float64)
        if self.curvature is not None and self.curvature.shape != (len(self.vertices),):
            raise InvalidMeshError("curvature channel length mismatch")
        self.normals = None if normals is None else np.asarray(normals, dtype=np.float64)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    def face_corners(self):
        """Vertex positions per face corner, shape (m, 3, 3)."""
        return self.vertices[self.faces]

    def face_areas(self):
        c = self.face_corners()
        cr = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        return 0.5 * np.linalg.norm(cr, axis=1)

    def face_normals(self):
        c = self.face_corners()
        cr = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        nrm = np.linalg.norm(cr, axis=1)
        return cr / nrm[:, None]

    def adjacency_directed(self):
        """Sparse matrix with a 1 for every directed (half-)edge i->j."""
        i = self.faces.ravel()
        j = self.faces[:, [1, 2, 0]].ravel()
        n = self.n_vertices
        return sparse.csr_matrix((np.ones(len(i)), (i, j)), shape=(n, n))

    def is_closed(self):
        adj = self.adjacency_directed()
        return (adj - adj.T).nnz == 0

    def boundary_edges(self):
        """Directed boundary edges (i, j), each oriented with the surface on its left."""
        i = self.faces.ravel()
        j = self.faces[:, [1, 2, 0]].ravel()
        n = self.n_vertices
        eid = i * n + j
        rev = j * n + i
        has_rev = np.isin(eid, rev)
        return np.column_stack([i[~has_rev], j[~has_rev]])

    def boundary_loops(self):
        """Ordered boundary loops, largest first.

        Each loop is a list of vertex indices in the direction induced by the
        face orientation (counterclockwise around the surface seen from the
        outward normal side). Raises for closed meshes.
        """
        edges = self.boundary_edges()
        if len(edges) == 0:
            raise MeshTopologyError("mesh is closed; no boundary loops")
        nxt = dict(zip(edges[:, 0].tolist(), edges[:, 1].tolist()))
        if len(nxt) != len(edges):
            raise NonManifoldEdgeError("boundary vertex with more than one outgoing boundary edge")
        loops = []
        seen = set()
        for start in nxt:
            if start in seen:
                continue
            loop = [start]
            seen.add(start)
            cur = nxt[start]
            while cur != start:
                loop.append(cur)
                seen.add(cur)
                cur = nxt[cur]
            loops.append(loop)
        loops.sort(key=len, reverse=True)
        return loops

    def boundary_vertex_mask(self):
        mask = np.zeros(self.n_vertices, dtype=bool)
        edges = self.boundary_edges()
        if len(edges):
            mask[edges.ravel()] = True
        return mask

    def vertex_degrees(self):
        deg = np.zeros(self.n_vertices, dtype=np.int64)
        np.add.at(deg, self.faces.ravel(), 1)
        return deg

    def euler_characteristic(self):
        i = self.faces.ravel()
        j = self.faces[:, [1, 2, 0]].ravel()
        n_edges = len(np.unique(np.minimum(i, j) * self.n_vertices + np.maximum(i, j)))
        return self.n_vertices - n_edges + self.n_faces

    def genus(self):
        """Genus of the underlying closed surface (boundary loops filled)."""
        try:
            b = len(self.boundary_loops())
        except MeshTopologyError:
            b = 0
        return (2 - b - self.euler_characteristic()) // 2

    def with_channel(self, curvature=None, normals=None):
        return TriMesh3(
            self.vertices,
            self.faces,
            curvature=self.curvature if curvature is None else curvature,
            normals=self.normals if normals is None else normals,
            validate=False,
        )


class UVMesh:
    """Planar embedding of a source mesh, sharing its connectivity.

    Carries the per-vertex curvature channel of the source and a provenance
    link (the source mesh plus the rigid pose applied before flattening) so
    that downstream consumers can go back to 3D quantities.
    """

    def __init__(self, points, faces, curvature=None, source=None, pose_rotation=None, validate=True):
        self.points = _as_vertex_array(points, 2)
        self.faces = _as_face_array(faces)
        if validate:
            _validate_connectivity(len(self.points), self.faces)
        self.curvature = None if curvature is None else np.asarray(curvature, dtype=np.float64)
        self.source = source
        self.pose_rotation = None if pose_rotation is None else np.asarray(pose_rotation, dtype=np.float64)

    @property
    def n_vertices(self):
        return len(self.points)

    @property
    def n_faces(self):
        return len(self.faces)

    def signed_areas(self):
        c = self.points[self.faces]
        e1 = c[:, 1] - c[:, 0]
        e2 = c[:, 2] - c[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def flipped_faces(self):
        return int(np.count_nonzero(self.signed_areas() <= 0))

    def bbox(self):
        return self.points.min(axis=0), self.points.max(axis=0)

    def bbox_diagonal(self):
        lo, hi = self.bbox()
        return float(np.linalg.norm(hi - lo))

    def boundary_loops(self):
        return TriMesh3(
            np.column_stack([self.points, np.zeros(self.n_vertices)]),
            self.faces,
            validate=False,
        ).boundary_loops()

    def boundary_vertex_mask(self):
        return TriMesh3(
            np.column_stack([self.points, np.zeros(self.n_vertices)]),
            self.faces,
            validate=False,
        ).boundary_vertex_mask()

    def with_points(self, points):
        return UVMesh(
            points,
            self.faces,
            curvature=self.curvature,
            source=self.source,
            pose_rotation=self.pose_rotation,
            validate=False,
        )


@dataclass
class VertexCurvature:
    """Per-vertex principal and mean curvatures.

    ``h == (k1 + k2) / 2`` holds exactly; ``is_boundary`` marks vertices whose
    values were copied from their nearest interior neighbor, ``is_degenerate``
    marks vertices with an unusable one-ring (forced to zero).
    """

    k1: np.ndarray
    k2: np.ndarray
    h: np.ndarray
    is_boundary: np.ndarray
    is_degenerate: np.ndarray = field(default=None)


def submesh(mesh, face_mask):
    """Mesh restricted to the selected faces, unreferenced vertices dropped.

    Returns (sub, vertex_indices) where vertex_indices[i] is the index in the
    parent mesh of the sub-mesh vertex i; per-vertex channels are sliced along.
    """
    face_mask = np.asarray(face_mask, dtype=bool)
    faces = mesh.faces[face_mask]
    if len(faces) == 0:
        raise InvalidMeshError("selection keeps no faces")
    used = np.unique(faces)
    remap = np.full(mesh.n_vertices, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    sub = TriMesh3(
        mesh.vertices[used],
        remap[faces],
        curvature=None if mesh.curvature is None else mesh.curvature[used],
        normals=None if mesh.normals is None else mesh.normals[used],
    )
    return sub, used


def load_mesh(path):
    """Read an ASCII OBJ file with triangular faces.

    Only ``v`` and ``f`` records are used; face entries may carry ``/``
    texture/normal suffixes, which are ignored. Vertex order is preserved.
    """
    vertices = []
    faces = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise MeshParseError(f"{path}:{lineno}: vertex needs 3 coordinates")
                try:
                    vertices.append([float(parts[1]), float(parts[2]), float(parts[3])])
                except ValueError as exc:
                    raise MeshParseError(f"{path}:{lineno}: bad vertex coordinate") from exc
            elif tag == "f":
                idx = parts[1:]
                if len(idx) != 3:
                    raise NonTriangularFaceError(f"{path}:{lineno}: face with {len(idx)} vertices")
                try:
                    face = [int(tok.split("/")[0]) for tok in idx]
                except ValueError as exc:
                    raise MeshParseError(f"{path}:{lineno}: bad face index") from exc
                if any(k == 0 for k in face):
                    raise MeshParseError(f"{path}:{lineno}: OBJ indices are 1-based")
                n = len(vertices)
                faces.append([k - 1 if k > 0 else n + k for k in face])
            # other record types (vn, vt, o, g, s, mtllib, usemtl) are ignored
    if not vertices:
        raise MeshParseError(f"{path}: no vertices found")
    return TriMesh3(np.array(vertices, dtype=np.float64), np.array(faces, dtype=np.int64))


def save_mesh(mesh, path):
    """Write a TriMesh3 or UVMesh (z = 0) as ASCII OBJ."""
    if isinstance(mesh, UVMesh):
        v = np.column_stack([mesh.points, np.zeros(mesh.n_vertices)])
    else:
        v = mesh.vertices
    with open(path, "w", encoding="utf-8") as fh:
        for p in v:
            fh.write(f"v {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def vertex_normals(mesh):
    """Area-weighted average of incident face normals, normalized to unit length."""
    deg = mesh.vertex_degrees()
    if (deg == 0).any():
        raise IsolatedVertexError(f"vertex {int(np.argmin(deg))} has no incident face")
    c = mesh.face_corners()
    fn = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])  # 2*area-weighted
    acc = np.zeros((mesh.n_vertices, 3))
    for k in range(3):
        np.add.at(acc, mesh.faces[:, k], fn)
    nrm = np.linalg.norm(acc, axis=1)
    nrm[nrm == 0] = 1.0
    return acc / nrm[:, None]


def _cotangents(mesh):
    """Per face, cotangent of the angle at each corner, shape (m, 3)."""
    c = mesh.face_corners()
    cots = np.empty((mesh.n_faces, 3))
    for k in range(3):
        a = c[:, (k + 1) % 3] - c[:, k]
        b = c[:, (k + 2) % 3] - c[:, k]
        cross = np.linalg.norm(np.cross(a, b), axis=1)
        cross[cross == 0] = np.finfo(float).tiny
        cots[:, k] = (a * b).sum(axis=1) / cross
    return cots


def cotangent_matrix(mesh, clamp=None):
    """Positive-semidefinite cotangent stiffness matrix K with
    ``u^T K u = sum_edges (cot a + cot b) (u_i - u_j)^2 / 2``,
    the integral of ``|grad u|^2`` of the piecewise-linear interpolant of u.
    """
    cots = _cotangents(mesh)
    if clamp is not None:
        cots = np.clip(cots, -clamp, clamp)
    n = mesh.n_vertices
    ii = []
    jj = []
    vv = []
    for k in range(3):
        i = mesh.faces[:, (k + 1) % 3]
        j = mesh.faces[:, (k + 2) % 3]
        w = 0.5 * cots[:, k]
        ii.extend([i, j, i, j])
        jj.extend([j, i, i, j])
        vv.extend([-w, -w, w, w])
    K = sparse.csr_matrix(
        (np.concatenate(vv), (np.concatenate(ii), np.concatenate(jj))), shape=(n, n)
    )
    K.sum_duplicates()
    return K


def _barycentric_vertex_areas(mesh):
    areas = mesh.face_areas()
    acc = np.zeros(mesh.n_vertices)
    for k in range(3):
        np.add.at(acc, mesh.faces[:, k], areas / 3.0)
    return acc


def _mixed_voronoi_areas(mesh):
    """Per-vertex mixed Voronoi cell areas.

    True Voronoi areas on non-obtuse triangles; obtuse triangles are split
    half to the obtuse corner and a quarter to each of the others, which keeps
    the cells non-overlapping and summing to the total surface area.
    """
    cots = _cotangents(mesh)
    c = mesh.face_corners()
    l2 = np.empty((mesh.n_faces, 3))
    for k in range(3):
        e = c[:, (k + 1) % 3] - c[:, (k + 2) % 3]  # edge opposite corner k
        l2[:, k] = (e * e).sum(axis=1)
    contrib = np.empty((mesh.n_faces, 3))
    for k in range(3):
        j1 = (k + 1) % 3
        j2 = (k + 2) % 3
        contrib[:, k] = 0.125 * (l2[:, j1] * cots[:, j1] + l2[:, j2] * cots[:, j2])
    obtuse = cots < 0
    any_obtuse = obtuse.any(axis=1)
    if any_obtuse.any():
        areas = mesh.face_areas()
        contrib[any_obtuse] = np.where(obtuse[any_obtuse], 0.5, 0.25) * areas[any_obtuse, None]
    acc = np.zeros(mesh.n_vertices)
    for k in range(3):
        np.add.at(acc, mesh.faces[:, k], contrib[:, k])
    return acc


def _angle_deficits(mesh):
    c = mesh.face_corners()
    total = np.zeros(mesh.n_vertices)
    for k in range(3):
        a = c[:, (k + 1) % 3] - c[:, k]
        b = c[:, (k + 2) % 3] - c[:, k]
        na = np.linalg.norm(a, axis=1)
        nb = np.linalg.norm(b, axis=1)
        cosang = np.clip((a * b).sum(axis=1) / np.maximum(na * nb, np.finfo(float).tiny), -1.0, 1.0)
        np.add.at(total, mesh.faces[:, k], np.arccos(cosang))
    return 2.0 * np.pi - total


def _nearest_interior_fill(mesh, values, boundary):
    """Overwrite values at boundary vertices with the value of the nearest
    interior vertex, nearest by breadth-first hops through mesh edges."""
    interior = ~boundary
    if not interior.any():
        return values
    adj = mesh.adjacency_directed()
    adj = adj + adj.T
    filled = values.copy()
    known = interior.copy()
    frontier = interior.copy()
    while not known.all():
        reach = (adj @ frontier.astype(np.float64)) > 0
        new = reach & ~known
        if not new.any():
            break  # disconnected component with no interior vertex
        # average over already-known neighbors of each newly reached vertex
        sub = adj[new][:, known]
        w = np.asarray(sub.sum(axis=1)).ravel()
        filled[new] = (sub @ filled[known]) / np.maximum(w, 1.0)
        known |= new
        frontier = new
    return filled


def curvature(mesh):
    """Mean and principal curvature per vertex.

    H comes from the cotangent Laplace-Beltrami mean-curvature normal
    (half its norm, signed by agreement with the vertex normal), the
    Gaussian curvature from the angle deficit, and k1 >= k2 are recovered
    as H +- sqrt(max(0, H^2 - K)). Boundary vertices get the value of their
    nearest interior neighbor and are flagged.
    """
    K_mat = cotangent_matrix(mesh)
    areas = _mixed_voronoi_areas(mesh)
    boundary = mesh.boundary_vertex_mask()
    normals = vertex_normals(mesh)

    degenerate = areas <= 0
    safe_area = np.where(degenerate, 1.0, areas)
    # mean curvature normal: (1 / (2 A_i)) * sum_j (cot a + cot b)(x_i - x_j),
    # which points along the outward normal on convex regions
    lap = np.asarray(2.0 * (K_mat @ mesh.vertices)) / (2.0 * safe_area)[:, None]
    h_mag = 0.5 * np.linalg.norm(lap, axis=1)
    sign = np.where((lap * normals).sum(axis=1) >= 0, 1.0, -1.0)
    h = sign * h_mag

    gauss = _angle_deficits(mesh) / safe_area

    h = np.where(degenerate, 0.0, h)
    gauss = np.where(degenerate, 0.0, gauss)
    h = _nearest_interior_fill(mesh, h, boundary)
    gauss = _nearest_interior_fill(mesh, gauss, boundary)

    root = np.sqrt(np.maximum(0.0, h * h - gauss))
    k1 = h + root
    k2 = h - root
    return VertexCurvature(k1=k1, k2=k2, h=h, is_boundary=boundary, is_degenerate=degenerate & ~boundary)


def save_curvature_csv(curv, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("vertex_id,k1,k2,H\n")
        for i in range(len(curv.h)):
            fh.write(f"{i},{curv.k1[i]:.17g},{curv.k2[i]:.17g},{curv.h[i]:.17g}\n")


def load_curvature_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    order = np.argsort(data[:, 0])
    data = data[order]
    return VertexCurvature(
        k1=data[:, 1],
        k2=data[:, 2],
        h=data[:, 3],
        is_boundary=np.zeros(len(data), dtype=bool),
    )
