"""Least-squares quasi-conformal solver.

Given a target Beltrami coefficient per face and positional constraints, this
module assembles the generalized-Laplacian system whose minimizer is the
quasi-conformal map with that coefficient, and solves it with a sparse direct
factorization. Map inversion and composition via point location live here too
because they share the solver's piecewise-linear map representation.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

from .beltrami import BeltramiField, PiecewiseLinearMap
from .errors import (
    EmptyOverlapError,
    FlippedFacesError,
    InsufficientConstraintsError,
    InvalidMeshError,
    SolverConvergenceError,
)
from .mesh import UVMesh

logger = logging.getLogger(__name__)

# direct factorization below this many vertices, iterative above
DIRECT_SOLVER_MAX_VERTICES = 200_000


def face_gradient_operators(points, faces):
    """Per-face linear maps from corner values to 2D gradients, shape (m, 2, 3).

    For nodal values g on face T, grad = G[T] @ g[faces[T]]; exact for the
    affine interpolant. Column i is rot90 of the edge opposite corner i over
    twice the signed area.
    """
    p = points[faces]
    e = p[:, [2, 0, 1]] - p[:, [1, 2, 0]]  # edge opposite corner i
    area2 = e[:, 0, 0] * e[:, 1, 1] - e[:, 0, 1] * e[:, 1, 0]
    if (area2 <= 0).any():
        raise InvalidMeshError(
            f"face {int(np.argmin(area2))} is degenerate or negatively oriented"
        )
    G = np.stack([-e[:, :, 1], e[:, :, 0]], axis=1)
    return G / area2[:, None, None], 0.5 * area2


def distortion_matrices(mu):
    """The 2x2 metric A = P^T P per face from mu = rho + i sigma."""
    mu.require_admissible("assemble")
    rho = mu.values.real
    sig = mu.values.imag
    denom = 1.0 - (rho * rho + sig * sig)
    A = np.empty((len(mu), 2, 2))
    A[:, 0, 0] = ((1 - rho) ** 2 + sig**2) / denom
    A[:, 1, 1] = ((1 + rho) ** 2 + sig**2) / denom
    A[:, 0, 1] = A[:, 1, 0] = -2 * sig / denom
    return A


def _scatter_face_blocks(faces, local, n):
    """Accumulate per-face 3x3 blocks into a sparse (n, n) matrix."""
    rows = np.repeat(faces, 3, axis=1).ravel()
    cols = np.tile(faces, (1, 3)).ravel()
    M = sparse.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))
    M.sum_duplicates()
    return M


@dataclass
class Constraints:
    """Positional constraints for a map solve.

    Hard pins become exact equalities (rows eliminated); springs are
    quadratic penalties pulling a vertex toward a target.
    """

    hard_idx: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    hard_pos: np.ndarray = field(default_factory=lambda: np.empty((0, 2)))
    soft_idx: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    soft_pos: np.ndarray = field(default_factory=lambda: np.empty((0, 2)))
    soft_weight: np.ndarray = field(default_factory=lambda: np.empty(0))

    def pin(self, idx, pos):
        self.hard_idx = np.concatenate([self.hard_idx, np.atleast_1d(np.asarray(idx, dtype=np.int64))])
        self.hard_pos = np.vstack([self.hard_pos, np.atleast_2d(np.asarray(pos, dtype=np.float64))])
        return self

    def spring(self, idx, pos, weight=1e3):
        idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
        self.soft_idx = np.concatenate([self.soft_idx, idx])
        self.soft_pos = np.vstack([self.soft_pos, np.atleast_2d(np.asarray(pos, dtype=np.float64))])
        self.soft_weight = np.concatenate([self.soft_weight, np.broadcast_to(np.asarray(weight, dtype=np.float64), idx.shape)])
        return self

    def n_constrained_vertices(self):
        return len(np.unique(np.concatenate([self.hard_idx, self.soft_idx])))


class QCSystem:
    """Assembled quadratic form of the least-squares quasi-conformal energy.

    energy([u; v]) = [u^T v^T] N [u; v] with N = blkdiag(L, L) - [[0, U], [-U, 0]],
    L the generalized Laplacian for the distortion metric and U the skew
    area matrix. Immutable after construction.
    """

    def __init__(self, mesh, mu):
        if len(mu) != mesh.n_faces:
            raise InvalidMeshError("Beltrami field / mesh face count mismatch")
        G, areas = face_gradient_operators(mesh.points, mesh.faces)
        A = distortion_matrices(mu)
        n = mesh.n_vertices
        # L = sum_T (area/2) G^T A G; U = (1/2) sum_T area G^T J^T G
        local_L = 0.5 * areas[:, None, None] * np.einsum("fai,fab,fbj->fij", G, A, G)
        Jt = np.array([[0.0, 1.0], [-1.0, 0.0]])
        local_W = areas[:, None, None] * np.einsum("fai,ab,fbj->fij", G, Jt, G)
        self.mesh = mesh
        self.mu = mu
        self.L = _scatter_face_blocks(mesh.faces, local_L, n)
        self.U = 0.5 * _scatter_face_blocks(mesh.faces, local_W, n)
        self.N = sparse.bmat([[self.L, -self.U], [self.U, self.L]], format="csr")
        logger.debug("assembled system: n=%d, nnz(N)=%d", n, self.N.nnz)

    @property
    def n_vertices(self):
        return self.mesh.n_vertices

    def energy(self, image):
        """E_LSQC of candidate image positions (n, 2)."""
        image = np.asarray(image, dtype=np.float64)
        x = np.concatenate([image[:, 0], image[:, 1]])
        return float(x @ (self.N @ x))


def assemble(mesh, mu):
    return QCSystem(mesh, mu)


def solve_constrained(N, n, constraints):
    """Minimize x^T N x over stacked coordinates x = [u; v] under constraints.

    Hard-constrained rows/columns are eliminated to keep the reduced system
    symmetric positive definite; springs only add to the diagonal. Returns
    image positions (n, 2) and the solve residual.
    """
    if constraints.n_constrained_vertices() < 2:
        raise InsufficientConstraintsError(
            "at least two constrained vertices are needed to fix scale and rotation"
        )
    if len(constraints.hard_idx) != len(np.unique(constraints.hard_idx)):
        raise InsufficientConstraintsError("vertex pinned to two different targets")

    fixed = np.concatenate([constraints.hard_idx, constraints.hard_idx + n])
    fixed_val = np.concatenate([constraints.hard_pos[:, 0], constraints.hard_pos[:, 1]])
    free = np.setdiff1d(np.arange(2 * n), fixed)

    diag = np.zeros(2 * n)
    rhs = np.zeros(2 * n)
    if len(constraints.soft_idx):
        np.add.at(diag, constraints.soft_idx, constraints.soft_weight)
        np.add.at(diag, constraints.soft_idx + n, constraints.soft_weight)
        np.add.at(rhs, constraints.soft_idx, constraints.soft_weight * constraints.soft_pos[:, 0])
        np.add.at(rhs, constraints.soft_idx + n, constraints.soft_weight * constraints.soft_pos[:, 1])

    N = N + sparse.diags(diag)
    if len(fixed):
        rhs = rhs[free] - N[free][:, fixed] @ fixed_val
        reduced = N[free][:, free].tocsc()
    else:
        reduced = N.tocsc()

    try:
        if n <= DIRECT_SOLVER_MAX_VERTICES:
            x_free = spla.splu(reduced).solve(rhs)
        else:
            x_free, info = spla.cg(reduced, rhs, rtol=1e-10, maxiter=5000)
            if info != 0:
                raise SolverConvergenceError(f"iterative solver stopped with status {info}")
    except RuntimeError as exc:
        raise InsufficientConstraintsError(f"reduced system is singular: {exc}") from exc

    if not np.all(np.isfinite(x_free)):
        raise SolverConvergenceError("solver produced non-finite values")
    resid = np.linalg.norm(reduced @ x_free - rhs)
    scale = np.linalg.norm(rhs) + 1e-30
    if resid > 1e-6 * scale:
        raise SolverConvergenceError(
            f"relative residual {resid / scale:.3e} exceeds tolerance", residual=float(resid)
        )

    x = np.empty(2 * n)
    x[free] = x_free
    if len(fixed):
        x[fixed] = fixed_val
    return np.column_stack([x[:n], x[n:]]), float(resid)


def solve_map(system, constraints):
    """Minimize the assembled energy subject to constraints."""
    image, resid = solve_constrained(system.N, system.n_vertices, constraints)
    plm = PiecewiseLinearMap(system.mesh, image)
    plm.solve_info = {
        "nnz": int(system.N.nnz),
        "residual": resid,
        "energy": system.energy(image),
        "flipped": plm.flipped_faces(),
    }
    logger.debug(
        "solve: nnz=%d residual=%.3e energy=%.6e flipped=%d",
        plm.solve_info["nnz"], resid, plm.solve_info["energy"], plm.solve_info["flipped"],
    )
    return plm


def lbs(mesh, mu, constraints):
    """Linear Beltrami solver: the map whose coefficient best matches mu.

    Warns (but does not raise) when constraint incompatibility flips faces.
    """
    plm = solve_map(assemble(mesh, mu), constraints)
    if plm.solve_info["flipped"]:
        logger.warning(
            "map came back with %d flipped faces (max |mu| = %.3f); "
            "constraints may be incompatible with the requested distortion",
            plm.solve_info["flipped"], mu.max_modulus(),
        )
    return plm


class MapSolver:
    """Repeated constrained solves over one mesh as the coefficient varies.

    Prepares the face geometry, the constraint elimination, and the
    mu-independent half of the system once. ``solve`` factorizes the current
    system exactly and keeps the factorization; ``probe`` answers a
    nearby-coefficient solve by iterative refinement against that
    factorization, falling back to a fresh one when the residual refuses to
    drop to round-off. Both return the same result up to solver tolerance,
    so probes are safe anywhere a full solve would be, just cheaper when the
    coefficient moved a little.
    """

    def __init__(self, mesh, constraints):
        if constraints.n_constrained_vertices() < 2:
            raise InsufficientConstraintsError(
                "at least two constrained vertices are needed to fix scale and rotation"
            )
        if len(constraints.hard_idx) != len(np.unique(constraints.hard_idx)):
            raise InsufficientConstraintsError("vertex pinned to two different targets")
        self.mesh = mesh
        n = mesh.n_vertices
        self.n = n
        self.G, self.areas = face_gradient_operators(mesh.points, mesh.faces)
        self.Gt = np.ascontiguousarray(self.G.transpose(0, 2, 1))
        Jt = np.array([[0.0, 1.0], [-1.0, 0.0]])
        local_W = self.areas[:, None, None] * np.einsum(
            "fai,ab,fbj->fij", self.G, Jt, self.G)
        U = 0.5 * _scatter_face_blocks(mesh.faces, local_W, n)

        self.fixed = np.concatenate([constraints.hard_idx, constraints.hard_idx + n])
        self.fixed_val = np.concatenate(
            [constraints.hard_pos[:, 0], constraints.hard_pos[:, 1]])
        self.free = np.setdiff1d(np.arange(2 * n), self.fixed)
        diag = np.zeros(2 * n)
        rhs = np.zeros(2 * n)
        if len(constraints.soft_idx):
            np.add.at(diag, constraints.soft_idx, constraints.soft_weight)
            np.add.at(diag, constraints.soft_idx + n, constraints.soft_weight)
            np.add.at(rhs, constraints.soft_idx,
                      constraints.soft_weight * constraints.soft_pos[:, 0])
            np.add.at(rhs, constraints.soft_idx + n,
                      constraints.soft_weight * constraints.soft_pos[:, 1])
        self.rhs0 = rhs
        self._lu = None
        self._x = None

        # the sparsity pattern never changes, so per-coefficient assembly is
        # data-only: face blocks are lexsorted into L's slots once, and
        # marker values record where every L and U slot lands in the block
        # matrix, with the constraint diagonal folded in by position
        rows = np.repeat(mesh.faces, 3, axis=1).ravel()
        cols = np.tile(mesh.faces, (1, 3)).ravel()
        self._order = np.lexsort((cols, rows))
        rs, cs = rows[self._order], cols[self._order]
        first = np.ones(len(rs), dtype=bool)
        first[1:] = (rs[1:] != rs[:-1]) | (cs[1:] != cs[:-1])
        self._segments = np.nonzero(first)[0]
        L0 = sparse.csr_matrix(
            (np.arange(1.0, first.sum() + 1), (rs[first], cs[first])), shape=(n, n))
        Um = U.copy()
        Um.data = np.arange(L0.nnz + 1.0, L0.nnz + U.nnz + 1)
        marked = sparse.bmat([[L0, -Um], [Um, L0]], format="csr")
        marked.sort_indices()
        self._pattern = marked
        self._slot = (np.abs(marked.data) - 1).astype(np.int64)
        self._sign = np.sign(marked.data)
        self._udata = U.data
        dpos = np.empty(2 * n, dtype=np.int64)
        for i in range(2 * n):
            lo, hi = marked.indptr[i], marked.indptr[i + 1]
            dpos[i] = lo + np.searchsorted(marked.indices[lo:hi], i)
        self._diag_pos = dpos
        self._diag = diag

    def _system(self, mu):
        AT = distortion_matrices(mu)
        local_L = 0.5 * self.areas[:, None, None] * (self.Gt @ AT @ self.G)
        ldata = np.add.reduceat(local_L.ravel()[self._order], self._segments)
        N = self._pattern.copy()
        N.data = self._sign * np.concatenate([ldata, self._udata])[self._slot]
        N.data[self._diag_pos] += self._diag
        if len(self.fixed):
            rhs = self.rhs0[self.free] - N[self.free][:, self.fixed] @ self.fixed_val
            return N[self.free][:, self.free], rhs
        return N, self.rhs0

    def _image(self, x_free):
        x = np.empty(2 * self.n)
        x[self.free] = x_free
        if len(self.fixed):
            x[self.fixed] = self.fixed_val
        return PiecewiseLinearMap(self.mesh, np.column_stack([x[:self.n], x[self.n:]]))

    def _check(self, A, x, rhs):
        if not np.all(np.isfinite(x)):
            raise SolverConvergenceError("solver produced non-finite values")
        resid = np.linalg.norm(A @ x - rhs)
        if resid > 1e-6 * (np.linalg.norm(rhs) + 1e-30):
            raise SolverConvergenceError(
                f"relative residual {resid / (np.linalg.norm(rhs) + 1e-30):.3e} "
                "exceeds tolerance", residual=float(resid))

    def solve(self, mu):
        A, rhs = self._system(mu)
        try:
            self._lu = spla.splu(A.tocsc())
        except RuntimeError as exc:
            raise InsufficientConstraintsError(
                f"reduced system is singular: {exc}") from exc
        self._x = self._lu.solve(rhs)
        self._check(A, self._x, rhs)
        return self._image(self._x)

    def probe(self, mu, max_refinements=6):
        if self._lu is None:
            return self.solve(mu)
        A, rhs = self._system(mu)
        scale = np.linalg.norm(rhs) + 1e-30
        x = self._x
        prev = np.inf
        for _ in range(max_refinements):
            r = rhs - A @ x
            resid = np.linalg.norm(r)
            if resid <= 1e-10 * scale:
                return self._image(x)
            if resid >= 0.5 * prev:
                break
            prev = resid
            x = x + self._lu.solve(r)
        # the stale factorization stopped contracting; refactorize here and
        # let later probes refine against the new base
        return self.solve(mu)


def invert_map(plmap):
    """Inverse of an orientation-preserving piecewise-linear map.

    The inverse of a simplicial map is itself simplicial over the image
    triangulation with the same connectivity, so this is a domain/image swap
    (exact, no resampling); evaluating it between vertices is point location
    on the image mesh.
    """
    flipped = plmap.flipped_faces()
    if flipped:
        raise FlippedFacesError(f"cannot invert a map with {flipped} flipped faces")
    domain = UVMesh(
        plmap.image,
        plmap.domain.faces,
        curvature=plmap.domain.curvature,
        source=plmap.domain.source,
        pose_rotation=plmap.domain.pose_rotation,
        validate=False,
    )
    return PiecewiseLinearMap(domain, plmap.domain.points)


class PointLocator:
    """Uniform-grid point location over a triangulated planar region."""

    def __init__(self, mesh, margin=1e-9):
        self.mesh = mesh
        pts = mesh.points
        tri = pts[mesh.faces]
        lo = pts.min(axis=0)
        hi = pts.max(axis=0)
        span = np.maximum(hi - lo, 1e-300)
        ncell = max(1, int(np.sqrt(mesh.n_faces)))
        self.lo, self.span, self.ncell = lo, span, ncell
        eps = margin * span.max()
        tlo = self._cell(tri.min(axis=1) - eps)
        thi = self._cell(tri.max(axis=1) + eps)
        # bucket every face into all cells its bounding box overlaps
        ny = thi[:, 1] - tlo[:, 1] + 1
        counts = (thi[:, 0] - tlo[:, 0] + 1) * ny
        fids = np.repeat(np.arange(mesh.n_faces), counts)
        local = np.arange(counts.sum()) - np.repeat(
            np.concatenate([[0], np.cumsum(counts)[:-1]]), counts
        )
        nyf = ny[fids]
        cells = (tlo[fids, 0] + local // nyf) * ncell + tlo[fids, 1] + local % nyf
        order = np.argsort(cells, kind="stable")
        self._cells_sorted = cells[order]
        self._fids_sorted = fids[order]
        self._starts = np.searchsorted(self._cells_sorted, np.arange(ncell * ncell + 1))
        # cached per-face barycentric solve data
        self._origin = tri[:, 0]
        e1 = tri[:, 1] - tri[:, 0]
        e2 = tri[:, 2] - tri[:, 0]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        det[det == 0] = np.finfo(float).tiny
        self._inv = np.empty((mesh.n_faces, 2, 2))
        self._inv[:, 0, 0] = e2[:, 1] / det
        self._inv[:, 0, 1] = -e2[:, 0] / det
        self._inv[:, 1, 0] = -e1[:, 1] / det
        self._inv[:, 1, 1] = e1[:, 0] / det

    def _cell(self, pts):
        c = np.floor((pts - self.lo) / self.span * self.ncell).astype(np.int64)
        return np.clip(c, 0, self.ncell - 1)

    def barycentric(self, faces, pts):
        d = pts - self._origin[faces]
        lam12 = np.einsum("pij,pj->pi", self._inv[faces], d)
        return np.column_stack([1.0 - lam12.sum(axis=1), lam12])

    def locate(self, pts, tol=1e-9):
        """Face index and barycentric coordinates per query point.

        Points outside every triangle get face -1 (caller decides fallback).
        """
        pts = np.asarray(pts, dtype=np.float64)
        q = len(pts)
        cell = self._cell(pts)
        cid = cell[:, 0] * self.ncell + cell[:, 1]
        start = self._starts[cid]
        count = self._starts[cid + 1] - start
        face_out = np.full(q, -1, dtype=np.int64)
        bary_out = np.zeros((q, 3))
        best_margin = np.full(q, -np.inf)
        pending = count > 0
        k = 0
        while pending.any() and k < (count.max() if count.size else 0):
            sel = np.nonzero(pending & (count > k))[0]
            f = self._fids_sorted[start[sel] + k]
            lam = self.barycentric(f, pts[sel])
            margin = lam.min(axis=1)
            better = margin > best_margin[sel]
            hit = (margin >= -tol) & better
            idx = sel[hit]
            face_out[idx] = f[hit]
            bary_out[idx] = lam[hit]
            best_margin[sel[better]] = margin[better]
            k += 1
        # a found face with margin >= -tol stays; others remain -1
        miss = best_margin < -tol
        face_out[miss] = -1
        return face_out, bary_out

    def project_to_boundary(self, pts):
        """Closest point on the mesh boundary for each query point."""
        loops = self.mesh.boundary_loops()
        segs = []
        for loop in loops:
            a = self.mesh.points[loop]
            b = self.mesh.points[np.roll(loop, -1)]
            segs.append((a, b))
        A = np.vstack([s[0] for s in segs])
        B = np.vstack([s[1] for s in segs])
        d = B - A
        len2 = (d * d).sum(axis=1)
        len2[len2 == 0] = np.finfo(float).tiny
        out = np.empty((len(pts), 2))
        for i, p in enumerate(np.asarray(pts, dtype=np.float64)):
            t = np.clip(((p - A) * d).sum(axis=1) / len2, 0.0, 1.0)
            proj = A + t[:, None] * d
            j = np.argmin(((proj - p) ** 2).sum(axis=1))
            out[i] = proj[j]
        return out


def evaluate_map(plmap, pts, locator=None):
    """Evaluate a piecewise-linear map at arbitrary points of its domain.

    Returns (values, inside_mask); points outside the domain are projected to
    the nearest boundary point first and flagged False.
    """
    locator = locator or PointLocator(plmap.domain)
    pts = np.asarray(pts, dtype=np.float64)
    faces, bary = locator.locate(pts)
    inside = faces >= 0
    out = np.empty_like(pts)
    if inside.any():
        out[inside] = plmap.evaluate(faces[inside], bary[inside])
    if (~inside).any():
        proj = locator.project_to_boundary(pts[~inside])
        pf, pb = locator.locate(proj, tol=1e-6)
        still = pf < 0
        if still.any():
            # numeric fallback: snap to the nearest domain vertex
            for j in np.nonzero(still)[0]:
                k = np.argmin(((plmap.domain.points - proj[j]) ** 2).sum(axis=1))
                pf[j] = np.nonzero((plmap.domain.faces == k).any(axis=1))[0][0]
                pb[j] = (plmap.domain.faces[pf[j]] == k).astype(float)
        out[~inside] = plmap.evaluate(pf, pb)
    return out, inside


def compose_maps(f1, f2_inv, locator=None):
    """Vertexwise composition f2_inv(f1(x)) over the domain of f1.

    Vertices of f1's domain whose image lies outside the domain of f2_inv are
    flagged in the returned map's ``overlap_mask`` and snapped to the nearest
    boundary value; an empty overlap is an error.
    """
    values, inside = evaluate_map(f2_inv, f1.image, locator=locator)
    if not inside.any():
        raise EmptyOverlapError("image of the first map misses the domain of the second")
    out = PiecewiseLinearMap(f1.domain, values)
    out.overlap_mask = inside
    return out


def save_map_csv(plmap, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("vertex_id,x,y\n")
        for i, (x, y) in enumerate(plmap.image):
            fh.write(f"{i},{x:.17g},{y:.17g}\n")


def load_map_csv(domain, path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    order = np.argsort(data[:, 0])
    return PiecewiseLinearMap(domain, data[order][:, 1:3])
