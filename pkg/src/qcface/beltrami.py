"""Per-face Beltrami-coefficient algebra.

A piecewise-linear map between triangle meshes restricts to an affine map on
each face, so its complex dilatation mu = f_zbar / f_z is one constant per
face. Everything in this module is a pure per-face computation on those
constants: measurement from a map, Jacobian, composition, admissibility
clamping, and a face-adjacency gradient.
"""

import logging

import numpy as np
from scipy import sparse

from .errors import (
    DegenerateMapError,
    InadmissibleFieldError,
    InvalidMeshError,
    OrientationViolatedError,
)

logger = logging.getLogger(__name__)


class BeltramiField:
    """One complex coefficient per face of a reference mesh."""

    def __init__(self, values, n_faces=None):
        self.values = np.asarray(values, dtype=np.complex128).ravel()
        if n_faces is not None and len(self.values) != n_faces:
            raise InvalidMeshError(
                f"field has {len(self.values)} values for {n_faces} faces"
            )
        if not np.all(np.isfinite(self.values)):
            raise InadmissibleFieldError("non-finite Beltrami coefficient")

    def __len__(self):
        return len(self.values)

    def max_modulus(self):
        return float(np.abs(self.values).max()) if len(self.values) else 0.0

    def is_admissible(self):
        return self.max_modulus() < 1.0

    def require_admissible(self, context=""):
        m = self.max_modulus()
        if m >= 1.0:
            where = f" in {context}" if context else ""
            raise InadmissibleFieldError(f"max |mu| = {m:.6g} >= 1{where}")
        return self

    @classmethod
    def zeros(cls, n_faces):
        return cls(np.zeros(n_faces, dtype=np.complex128))


class PiecewiseLinearMap:
    """A map given by image positions for every vertex of its domain mesh."""

    def __init__(self, domain, image):
        self.domain = domain
        self.image = np.asarray(image, dtype=np.float64)
        if self.image.shape != (domain.n_vertices, 2):
            raise InvalidMeshError(
                f"image shape {self.image.shape} does not match domain with "
                f"{domain.n_vertices} vertices"
            )
        if not np.all(np.isfinite(self.image)):
            raise InvalidMeshError("non-finite image coordinate")

    def image_signed_areas(self):
        c = self.image[self.domain.faces]
        e1 = c[:, 1] - c[:, 0]
        e2 = c[:, 2] - c[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def is_orientation_preserving(self):
        return bool((self.image_signed_areas() > 0).all())

    def flipped_faces(self):
        return int(np.count_nonzero(self.image_signed_areas() <= 0))

    def evaluate(self, faces, bary):
        """Map points given as (face index, barycentric coordinates)."""
        corners = self.image[self.domain.faces[faces]]
        return np.einsum("pk,pkd->pd", bary, corners)


def wirtinger_from_corners(domain_corners, image_corners):
    """Per-face complex derivatives (f_z, f_zbar) of the affine interpolant.

    The gradient of the linear function with corner values g_k on a triangle
    with corners p_k is sum_k g_k * rot90(opposite edge) / (2 area); applying
    it to the complex-valued image w and converting via f_z = (f_x - i f_y)/2,
    f_zbar = (f_x + i f_y)/2. Both corner arrays have shape (m, 3, 2).
    """
    p = np.asarray(domain_corners, dtype=np.float64)
    wf = image_corners[:, :, 0] + 1j * image_corners[:, :, 1]
    e = p[:, [2, 0, 1]] - p[:, [1, 2, 0]]  # edge opposite each corner
    area2 = e[:, 0, 0] * e[:, 1, 1] - e[:, 0, 1] * e[:, 1, 0]
    # rot90 of edge vectors: (x, y) -> (-y, x)
    gx = -(wf * e[:, :, 1]).sum(axis=1) / area2
    gy = (wf * e[:, :, 0]).sum(axis=1) / area2
    fz = 0.5 * (gx - 1j * gy)
    fzb = 0.5 * (gx + 1j * gy)
    return fz, fzb


def _wirtinger_derivatives(points, faces, image):
    return wirtinger_from_corners(points[faces], image[faces])


def map_derivatives(plmap):
    """f_z and f_zbar per face of the domain mesh."""
    return _wirtinger_derivatives(plmap.domain.points, plmap.domain.faces, plmap.image)


def beltrami_from_map(plmap, fz_floor=1e-12):
    """Measure mu = f_zbar / f_z on every face.

    Orientation-reversing faces come out with |mu| > 1 rather than raising;
    a conformally degenerate face (f_z ~ 0) is an error because mu is
    unbounded there.
    """
    fz, fzb = map_derivatives(plmap)
    scale = max(np.abs(fz).max(), np.abs(fzb).max(), 1.0)
    bad = np.abs(fz) <= fz_floor * scale
    if bad.any():
        raise DegenerateMapError(
            f"conformal factor vanishes on face {int(np.nonzero(bad)[0][0])}",
            faces=np.nonzero(bad)[0].tolist(),
        )
    return BeltramiField(fzb / fz)


def jacobian_from_mu(fz_magnitude, mu):
    """J = |f_z|^2 (1 - |mu|^2) per face; requires an admissible field."""
    m = mu.max_modulus()
    if m >= 1.0:
        raise OrientationViolatedError(f"max |mu| = {m:.6g} >= 1 flips orientation")
    fz_magnitude = np.asarray(fz_magnitude, dtype=np.float64)
    if (fz_magnitude <= 0).any():
        raise DegenerateMapError("nonpositive |f_z|")
    return fz_magnitude**2 * (1.0 - np.abs(mu.values) ** 2)


def compose_beltrami(mu_f, mu_g_pulled, tau_ratio, denom_floor=1e-12):
    """Coefficient of g o f from mu_f, mu_g sampled along f, and tau = conj(f_z)/f_z.

    All three arguments are per-face over the domain of f.
    """
    mf = mu_f.values
    mg = mu_g_pulled.values
    tau = np.asarray(tau_ratio, dtype=np.complex128).ravel()
    if not (len(mf) == len(mg) == len(tau)):
        raise InvalidMeshError("composition operands differ in face count")
    denom = 1.0 + np.conj(mf) * mg * tau
    small = np.abs(denom) < denom_floor
    if small.any():
        raise DegenerateMapError(
            f"composition denominator vanishes on face {int(np.nonzero(small)[0][0])}"
        )
    return BeltramiField((mf + mg * tau) / denom)


def clamp_activation(raw):
    """Map arbitrary per-face complex values into the open unit disk.

    Modulus goes through tanh, argument is preserved (arg(0) taken as 0), so
    the output is always an admissible field.
    """
    raw = np.asarray(raw, dtype=np.complex128).ravel()
    if not np.all(np.isfinite(raw)):
        raise InadmissibleFieldError("non-finite activation input")
    mod = np.abs(raw)
    out = np.zeros_like(raw)
    nz = mod > 0
    # real-valued scale first: complex division by a subnormal modulus overflows
    out[nz] = (np.tanh(mod[nz]) / mod[nz]) * raw[nz]
    # tanh rounds to 1.0 in double precision once |m| > ~19; pull such values
    # back inside the unit disk with enough margin to survive hypot rounding
    m_out = np.abs(out)
    over = m_out >= 1.0 - 1e-12
    if over.any():
        out[over] *= (1.0 - 1e-12) / m_out[over]
    return BeltramiField(out)


def activation_inverse(mu):
    """Left inverse of clamp_activation on admissible fields (artanh on modulus)."""
    v = np.asarray(mu.values if isinstance(mu, BeltramiField) else mu, dtype=np.complex128)
    mod = np.abs(v)
    if (mod >= 1.0).any():
        raise InadmissibleFieldError("activation_inverse requires |mu| < 1")
    out = np.zeros_like(v)
    nz = mod > 0
    out[nz] = np.arctanh(mod[nz]) * v[nz] / mod[nz]
    return out


def face_adjacency(faces, n_vertices):
    """Sparse boolean face-face adjacency across shared (undirected) edges."""
    faces = np.asarray(faces)
    m = len(faces)
    i = faces.ravel()
    j = faces[:, [1, 2, 0]].ravel()
    eid = np.minimum(i, j).astype(np.int64) * n_vertices + np.maximum(i, j)
    fid = np.repeat(np.arange(m), 3)
    order = np.argsort(eid, kind="stable")
    eid_s = eid[order]
    fid_s = fid[order]
    same = np.nonzero(eid_s[:-1] == eid_s[1:])[0]
    a = fid_s[same]
    b = fid_s[same + 1]
    return sparse.csr_matrix(
        (np.ones(2 * len(a), dtype=bool), (np.concatenate([a, b]), np.concatenate([b, a]))),
        shape=(m, m),
    )


def face_centroids(points, faces):
    return points[faces].mean(axis=1)


def mu_gradient(mu, mesh):
    """Per face: sum over edge-neighbors of |mu - mu'|^2 / centroid_distance^2."""
    adj = face_adjacency(mesh.faces, mesh.n_vertices).tocoo()
    cent = face_centroids(mesh.points, mesh.faces)
    out = np.zeros(mesh.n_faces)
    if adj.nnz == 0:
        return out
    d2 = ((cent[adj.row] - cent[adj.col]) ** 2).sum(axis=1)
    diff2 = np.abs(mu.values[adj.row] - mu.values[adj.col]) ** 2
    np.add.at(out, adj.row, diff2 / d2)
    return out


def save_beltrami_csv(mu, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("face_id,re,im\n")
        for i, v in enumerate(mu.values):
            fh.write(f"{i},{v.real:.17g},{v.imag:.17g}\n")


def load_beltrami_csv(path, n_faces=None):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    order = np.argsort(data[:, 0])
    data = data[order]
    return BeltramiField(data[:, 1] + 1j * data[:, 2], n_faces=n_faces)
