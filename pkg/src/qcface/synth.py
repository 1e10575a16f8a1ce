"""Synthetic face-like surface corpus with exact ground truth.

Each identity is a smooth height field over an egg-shaped domain, built from
a small vector of feature scalars (nose, eye sockets, brows, mouth, cheeks,
chin). Landmarks sit at the analytic feature centers, so their positions and
survival under cuts are known exactly; that is what makes the corpus usable
as an oracle for detection, registration and recognition.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .beltrami import BeltramiField, PiecewiseLinearMap
from .errors import (
    ConfigError,
    DegeneratePartialError,
    FlippedFacesError,
    HolePlacementError,
    InadmissibleFieldError,
    MeshTopologyError,
    NonManifoldEdgeError,
)
from .mesh import TriMesh3, UVMesh, curvature, submesh
from .solver import Constraints, lbs

logger = logging.getLogger(__name__)

N_LANDMARKS = 68

PARAM_NAMES = (
    "dome",
    "nose_height",
    "nose_width",
    "nose_length",
    "eye_depth",
    "eye_spacing",
    "eye_height",
    "brow_ridge",
    "mouth_curve",
    "mouth_width",
    "cheek",
    "chin",
)

PARAM_RANGES = np.array(
    [
        [0.15, 0.30],  # dome
        [0.15, 0.35],  # nose_height
        [0.10, 0.14],  # nose_width
        [0.23, 0.27],  # nose_length
        [0.04, 0.12],  # eye_depth
        [0.28, 0.38],  # eye_spacing
        [0.30, 0.40],  # eye_height
        [0.02, 0.10],  # brow_ridge
        [0.03, 0.10],  # mouth_curve
        [0.26, 0.36],  # mouth_width
        [0.02, 0.09],  # cheek
        [0.03, 0.12],  # chin
    ]
)

# face outline: ellipse semi-axes, plus a quadratic taper that narrows the
# chin; the taper also makes the vertical coordinate distribution decisively
# skewed, which pins down the pose frame for every cut of every identity
SEMI_AXES = (0.85, 1.15)
_TAPER = 0.12


@dataclass
class SyntheticIdentity:
    """One generated face: mesh, parameters and exact landmark ground truth.

    landmark_xy are layout-plane coordinates of the snapped landmark
    vertices; flattening a face puts its vertices in a different frame, so
    landmark positions there are mesh.points[landmark_vertices] of the
    flattened mesh, not these.
    """

    seed: int
    params: np.ndarray
    mesh: TriMesh3
    landmark_vertices: np.ndarray
    landmark_xy: np.ndarray
    resolution: int


@dataclass
class PartialFace:
    """A cut of an identity with the surviving-landmark bookkeeping.

    landmark_vertices holds indices into the partial mesh, -1 where the
    landmark was cut away; landmark_mask is the survival indicator.
    """

    mesh: TriMesh3
    landmark_mask: np.ndarray
    landmark_vertices: np.ndarray
    identity: SyntheticIdentity
    cut: str


@dataclass(frozen=True)
class HalfPlane:
    """Keep the side a*x + b*y <= c of the line."""

    a: float
    b: float
    c: float

    def contains(self, pts):
        return self.a * pts[:, 0] + self.b * pts[:, 1] <= self.c


@dataclass(frozen=True)
class PolygonRegion:
    """Keep the inside of a simple polygon (even-odd rule)."""

    vertices: np.ndarray

    def contains(self, pts):
        v = np.asarray(self.vertices, dtype=np.float64)
        x, y = pts[:, 0], pts[:, 1]
        inside = np.zeros(len(pts), dtype=bool)
        k = len(v)
        for i in range(k):
            x1, y1 = v[i]
            x2, y2 = v[(i + 1) % k]
            crosses = (y1 > y) != (y2 > y)
            with np.errstate(divide="ignore", invalid="ignore"):
                xc = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            inside ^= crosses & (x < np.where(crosses, xc, np.inf))
        return inside


def _lattice_faces(n):
    idx = np.arange(n * n).reshape(n, n)
    v00 = idx[:-1, :-1].ravel()
    v10 = idx[:-1, 1:].ravel()
    v01 = idx[1:, :-1].ravel()
    v11 = idx[1:, 1:].ravel()
    return np.concatenate(
        [np.column_stack([v00, v10, v11]), np.column_stack([v00, v11, v01])]
    )


def _face_domain(resolution):
    """Egg-shaped planar domain; the lattice boundary lands exactly on it."""
    s = np.linspace(-1.0, 1.0, resolution)
    X, Y = np.meshgrid(s, s)
    u = X * np.sqrt(1.0 - 0.5 * Y * Y)
    v = Y * np.sqrt(1.0 - 0.5 * X * X)
    x = SEMI_AXES[0] * u
    y = SEMI_AXES[1] * (v + _TAPER * v * v)
    return np.column_stack([x.ravel(), y.ravel()]), _lattice_faces(resolution)


def _outline_point(theta):
    u = np.cos(theta)
    v = np.sin(theta)
    return np.column_stack(
        [SEMI_AXES[0] * u, SEMI_AXES[1] * (v + _TAPER * v * v)]
    )


def _gauss(x, y, cx, cy, sx, sy):
    sx = max(float(sx), 1e-9)
    sy = max(float(sy), 1e-9)
    return np.exp(-((x - cx) ** 2) / (2 * sx * sx) - ((y - cy) ** 2) / (2 * sy * sy))


def height_field(params, x, y):
    """Surface height at (x, y) for one identity's feature scalars."""
    p = np.asarray(params, dtype=np.float64)
    (dome, nh, nw, nl, ed, es, eh, br, mc, mw, ck, ch) = p
    z = dome * _gauss(x, y, 0.0, 0.0, 0.75, 1.05)
    z += nh * _gauss(x, y, 0.0, 0.10, nw, nl)
    z -= ed * (_gauss(x, y, -es, eh, 0.10, 0.10) + _gauss(x, y, es, eh, 0.10, 0.10))
    z += br * (
        _gauss(x, y, -es, eh + 0.16, 0.12, 0.05)
        + _gauss(x, y, es, eh + 0.16, 0.12, 0.05)
    )
    z += mc * _gauss(x, y, 0.0, -0.50, 0.6 * mw, 0.05)
    # corner dimples and nostril bumps break the self-similarity of the lip
    # ridge and nose base, so patches there are locally distinctive
    z -= 0.5 * mc * (
        _gauss(x, y, -mw, -0.50, 0.055, 0.055) + _gauss(x, y, mw, -0.50, 0.055, 0.055)
    )
    z += 0.35 * nh * (
        _gauss(x, y, -1.2 * nw, 0.10 - 1.1 * nl, 0.07, 0.07)
        + _gauss(x, y, 1.2 * nw, 0.10 - 1.1 * nl, 0.07, 0.07)
    )
    z += ck * (
        _gauss(x, y, -(es + 0.28), -0.15, 0.16, 0.16)
        + _gauss(x, y, es + 0.28, -0.15, 0.16, 0.16)
    )
    z += ch * _gauss(x, y, 0.0, -0.82, 0.14, 0.14)
    return z


def _landmark_layout(params):
    """Analytic landmark positions (68, 2): jaw, brows, nose, eyes, mouth."""
    p = np.asarray(params, dtype=np.float64)
    (_, _, nw, nl, _, es, eh, _, _, mw, _, _) = p
    pts = []
    theta = np.linspace(0.95 * np.pi, 2.05 * np.pi, 17)
    pts.append(_outline_point(theta))
    for side in (-1.0, 1.0):
        off = np.linspace(-0.12, 0.12, 5)
        pts.append(np.column_stack([side * es + off, np.full(5, eh + 0.16)]))
    bridge_y = np.linspace(eh - 0.04, 0.18, 3)
    pts.append(np.column_stack([np.zeros(3), bridge_y]))
    pts.append(np.array([[0.0, 0.10]]))  # nose tip at the ridge center
    base_x = np.linspace(-1.2 * max(nw, 0.05), 1.2 * max(nw, 0.05), 5)
    pts.append(np.column_stack([base_x, np.full(5, 0.10 - 1.1 * max(nl, 0.05))]))
    ang6 = np.linspace(0, 2 * np.pi, 6, endpoint=False)
    for side in (-1.0, 1.0):
        pts.append(
            np.column_stack(
                [side * es + 0.11 * np.cos(ang6), eh + 0.055 * np.sin(ang6)]
            )
        )
    ang12 = np.linspace(0, 2 * np.pi, 12, endpoint=False)
    mw_eff = max(mw, 0.1)
    pts.append(
        np.column_stack([mw_eff * np.cos(ang12), -0.50 + 0.09 * np.sin(ang12)])
    )
    ang8 = np.linspace(0, 2 * np.pi, 8, endpoint=False)
    pts.append(
        np.column_stack([0.6 * mw_eff * np.cos(ang8), -0.50 + 0.045 * np.sin(ang8)])
    )
    out = np.vstack(pts)
    assert out.shape == (N_LANDMARKS, 2)
    return out


def draw_params(seed):
    rng = np.random.default_rng(seed)
    return rng.uniform(PARAM_RANGES[:, 0], PARAM_RANGES[:, 1])


def generate(seed, resolution=48, params=None):
    """Build one synthetic identity; same seed gives an identical mesh."""
    if resolution < 32:
        raise ConfigError(f"resolution {resolution} too coarse; need >= 32")
    if params is None:
        params = draw_params(seed)
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (len(PARAM_NAMES),):
        raise ConfigError(f"expected {len(PARAM_NAMES)} feature scalars")
    xy, faces = _face_domain(resolution)
    z = height_field(params, xy[:, 0], xy[:, 1])
    mesh = TriMesh3(np.column_stack([xy, z]), faces)
    mesh = mesh.with_channel(curvature=curvature(mesh).h)
    landmark_xy = _landmark_layout(params)
    _, idx = cKDTree(xy).query(landmark_xy)
    return SyntheticIdentity(
        seed=seed,
        params=params,
        mesh=mesh,
        landmark_vertices=idx.astype(np.int64),
        landmark_xy=landmark_xy,
        resolution=resolution,
    )


def template_identity(resolution=48):
    """The canonical face every partial is registered against: mid-range features."""
    return generate(-1, resolution=resolution, params=PARAM_RANGES.mean(axis=1))


def _face_components(mesh):
    """Label faces by edge-connected component."""
    n = mesh.n_vertices
    i = mesh.faces.ravel()
    j = mesh.faces[:, [1, 2, 0]].ravel()
    eid = np.minimum(i, j) * n + np.maximum(i, j)
    order = np.argsort(eid, kind="stable")
    fid = np.repeat(np.arange(mesh.n_faces), 3)[order]
    eid = eid[order]
    same = eid[1:] == eid[:-1]
    from scipy.sparse import csgraph, csr_matrix

    a, b = fid[:-1][same], fid[1:][same]
    adj = csr_matrix(
        (np.ones(len(a)), (a, b)), shape=(mesh.n_faces, mesh.n_faces)
    )
    ncomp, labels = csgraph.connected_components(adj, directed=False)
    return ncomp, labels


def _partial_from_keep(identity, keep, cut_name):
    mesh = identity.mesh
    if keep.sum() < 0.1 * mesh.n_faces:
        raise DegeneratePartialError(
            f"cut keeps {keep.sum()} of {mesh.n_faces} faces"
        )
    part, used = submesh(mesh, keep)
    ncomp, labels = _face_components(part)
    if ncomp > 1:
        counts = np.bincount(labels)
        part, used2 = submesh(part, labels == np.argmax(counts))
        used = used[used2]
    new_index = np.full(mesh.n_vertices, -1, dtype=np.int64)
    new_index[used] = np.arange(len(used))
    lmv = new_index[identity.landmark_vertices]
    return PartialFace(
        mesh=part,
        landmark_mask=lmv >= 0,
        landmark_vertices=lmv,
        identity=identity,
        cut=cut_name,
    )


def cut_partial(identity, region, name=None):
    """Keep the faces fully inside the region; report which landmarks survive."""
    pts = identity.mesh.vertices[:, :2]
    inside = region.contains(pts)
    keep = inside[identity.mesh.faces].all(axis=1)
    partial = _partial_from_keep(identity, keep, name or type(region).__name__)
    loops = partial.mesh.boundary_loops()
    if len(loops) != 1 or partial.mesh.genus() != 0:
        raise MeshTopologyError(
            f"cut region produced {len(loops)} boundary loops"
        )
    return partial


def full_face(identity):
    """The identity packaged as an uncut partial (all landmarks present)."""
    return PartialFace(
        mesh=identity.mesh,
        landmark_mask=np.ones(N_LANDMARKS, dtype=bool),
        landmark_vertices=identity.landmark_vertices.copy(),
        identity=identity,
        cut="full",
    )


def cut_holes(identity, n_holes, radius_range=(0.08, 0.18), seed=0, centers=None):
    """Punch disk-shaped holes at random (or given) spots.

    Random placements that merge with the outer boundary, another hole, or
    pinch the surface are rejected and redrawn, up to 10 tries per hole;
    explicit centers get a single try each.
    """
    if n_holes < 1:
        raise ConfigError("need at least one hole")
    lo, hi = float(radius_range[0]), float(radius_range[1])
    if hi <= 0:
        logger.warning("hole radius range %s is empty; returning the full face", radius_range)
        return full_face(identity)
    rng = np.random.default_rng(seed)
    mesh = identity.mesh
    centroids = mesh.vertices[mesh.faces].mean(axis=1)[:, :2]
    keep = np.ones(mesh.n_faces, dtype=bool)
    for h in range(n_holes):
        placed = False
        for _ in range(1 if centers is not None else 10):
            r = rng.uniform(lo, hi)
            if centers is not None:
                c = np.asarray(centers[h], dtype=np.float64)
            else:
                c = rng.uniform((-0.55, -0.65), (0.55, 0.65)) * np.array(SEMI_AXES)
            cand = keep & (np.linalg.norm(centroids - c, axis=1) >= r)
            if cand.sum() == keep.sum():
                continue  # hole missed the surface entirely
            try:
                part, _ = submesh(mesh, cand)
                ncomp, _ = _face_components(part)
                if ncomp != 1 or len(part.boundary_loops()) != h + 2:
                    continue
            except (MeshTopologyError, NonManifoldEdgeError):
                continue
            keep = cand
            placed = True
            break
        if not placed:
            raise HolePlacementError(f"no admissible placement for hole {h + 1}")
    return _partial_from_keep(identity, keep, f"{n_holes}-holes")


def warp_ground_truth(uv, mu_gt, seed=0):
    """Distort a flattened face by a known coefficient plus a random similarity.

    The map is solved with only two pinned vertices, so its measured
    coefficient tracks mu_gt closely instead of being fought by boundary
    constraints; the similarity applied afterwards moves the boundary without
    touching the coefficient. Returns (warped UVMesh, exact map from uv to
    it): a registration problem whose answer is known by construction.
    """
    mu_gt = mu_gt if isinstance(mu_gt, BeltramiField) else BeltramiField(mu_gt)
    if mu_gt.max_modulus() > 0.7:
        raise InadmissibleFieldError(
            f"ground-truth warp needs |mu| <= 0.7, got {mu_gt.max_modulus():.3f}"
        )
    loop = np.array(uv.boundary_loops()[0])
    pts = uv.points[loop]
    i1 = int(np.argmax(((pts - pts[0]) ** 2).sum(axis=1)))
    plm = lbs(uv, mu_gt, Constraints().pin(loop[[0, i1]], pts[[0, i1]]))
    if plm.flipped_faces():
        raise FlippedFacesError(
            f"requested coefficient folds the surface ({plm.flipped_faces()} faces)"
        )
    rng = np.random.default_rng(seed)
    theta = rng.uniform(-0.15, 0.15)
    scale = rng.uniform(0.9, 1.1)
    shift = rng.uniform(-0.05, 0.05, 2) * uv.bbox_diagonal()
    c, s = np.cos(theta), np.sin(theta)
    R = np.array([[c, -s], [s, c]])
    center = plm.image.mean(axis=0)
    image = center + scale * (plm.image - center) @ R.T + shift
    plm = PiecewiseLinearMap(uv, image)
    warped = UVMesh(
        image,
        uv.faces,
        curvature=uv.curvature,
        source=uv.source,
        pose_rotation=uv.pose_rotation,
        validate=False,
    )
    return warped, plm
