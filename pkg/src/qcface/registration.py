"""Deformable registration of a partial flattened face onto a template.

The unknown is a complex distortion coefficient on a coarse control grid
over the moving mesh, spread to faces bilinearly. Each iteration solves the
map realizing the current coefficient with landmark springs, blends the
controls toward the coefficient the solved map actually attained, adds a
finite-difference descent step on a rotating subset of controls, and accepts
the composite update through a backtracking line search on the full
objective, so the recorded loss never increases once the weight schedule has
settled.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .beltrami import (
    BeltramiField,
    PiecewiseLinearMap,
    beltrami_from_map,
    clamp_activation,
)
from .errors import ConfigError, UnderConstrainedError
from .landmarks import CurvatureImage, LandmarkSet, coarse_align, save_pgm
from .mesh import UVMesh
from .solver import (
    Constraints,
    MapSolver,
    PointLocator,
    compose_maps,
    evaluate_map,
    invert_map,
    save_map_csv,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Face:
    """The three channels registration consumes for one subject."""

    uv: UVMesh
    landmarks: LandmarkSet
    image: CurvatureImage


@dataclass(frozen=True)
class RegistrationConfig:
    """Weights and iteration controls; every field is overridable per run.

    The landmark and curvature weights enter the reported loss; the spring
    weight is the solver-side stiffness pulling landmark vertices toward
    their targets. Springs run stiffer and the curvature weight ramps from
    zero during the first ``warmup`` iterations, after which all weights are
    frozen so the accepted-loss trace is comparable across iterations.
    """

    control_grid: int = 16
    coefficient_weight: float = 1.0
    smoothness_weight: float = 0.5
    landmark_weight: float = 10.0
    curvature_weight: float = 1.0
    spring_weight: float = 100.0
    warmup: int = 5
    warmup_spring_boost: float = 3.0
    blend: float = 0.5
    gradient_grid: int = 4
    gradient_every: int = 2
    gradient_step: float = 1e-5
    gradient_scale: float = 0.05
    probe_stride: int = 8
    curvature_stride: int = 1
    max_iterations: int = 200
    rel_tol: float = 1e-5
    abs_tol: float = 1e-18
    max_halvings: int = 20

    def validate(self):
        if self.control_grid < 2:
            raise ConfigError("control grid must be at least 2x2")
        if self.gradient_every and self.gradient_grid < 2:
            raise ConfigError("gradient lattice must be at least 2x2")
        if self.max_iterations < 1:
            raise ConfigError("need at least one iteration")
        if not 0.0 < self.blend <= 1.0:
            raise ConfigError("blend factor must lie in (0, 1]")
        if min(self.coefficient_weight, self.smoothness_weight,
               self.landmark_weight, self.curvature_weight) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.curvature_stride < 1 or self.probe_stride < 1:
            raise ConfigError("pixel strides must be positive")
        return self


@dataclass(frozen=True)
class RegLoss:
    """The four objective components, already weighted, plus their sum."""

    coefficient: float
    smoothness: float
    landmark: float
    curvature: float
    overlap_count: int
    empty_overlap: bool

    @property
    def total(self):
        return self.coefficient + self.smoothness + self.landmark + self.curvature


@dataclass
class RegistrationResult:
    """Map from the moving UV frame into the template UV frame plus diagnostics.

    ``trace`` has one row per iteration: the four weighted loss components
    and their total, under the weight schedule in effect at that iteration.
    ``overlap_mask`` flags template pixels covered by both curvature images
    after warping.
    """

    mu_star: BeltramiField
    map: PiecewiseLinearMap
    registered_landmarks: LandmarkSet
    trace: np.ndarray
    overlap_mask: np.ndarray
    landmark_mask: np.ndarray
    iterations: int
    converged: bool
    empty_overlap: bool

    def export(self, directory):
        """Write map, coefficient, loss trace and overlap mask artifacts."""
        import os

        os.makedirs(directory, exist_ok=True)
        save_map_csv(self.map, os.path.join(directory, "map.csv"))
        with open(os.path.join(directory, "mu.csv"), "w", encoding="utf-8") as fh:
            fh.write("face_id,re,im\n")
            for i, m in enumerate(self.mu_star.values):
                fh.write(f"{i},{m.real:.17g},{m.imag:.17g}\n")
        with open(os.path.join(directory, "loss_trace.csv"), "w", encoding="utf-8") as fh:
            fh.write("iteration,coefficient,smoothness,landmark,curvature,total\n")
            for k, row in enumerate(self.trace):
                fh.write(f"{k}," + ",".join(f"{v:.17g}" for v in row) + "\n")
        mask_image = CurvatureImage(
            pixels=self.overlap_mask.astype(np.float64),
            coverage=np.ones_like(self.overlap_mask, dtype=bool),
            origin=np.zeros(2),
            scale=1.0,
        )
        save_pgm(mask_image, os.path.join(directory, "overlap.pgm"))


@dataclass(frozen=True)
class CrossRegistration:
    """Composed map between two partials through the template.

    ``shared_landmarks`` lists template landmark ids present on both sides;
    ``vertex_overlap`` flags domain vertices whose image lies inside the
    other partial.
    """

    map: PiecewiseLinearMap
    shared_landmarks: np.ndarray
    vertex_overlap: np.ndarray


def _inverse_activation(values, cap=0.99):
    """Raw field whose clamped image reproduces ``values``.

    Moduli are capped just inside the unit disk first, so coefficients
    measured off a nearly folded map stay finite.
    """
    values = np.asarray(values, dtype=np.complex128)
    r = np.abs(values)
    scale = np.ones_like(r)
    over = r > cap
    scale[over] = cap / r[over]
    capped = values * scale
    r = np.minimum(r, cap)
    out = np.zeros_like(values)
    nz = r > 0
    out[nz] = (np.arctanh(r[nz]) / r[nz]) * capped[nz]
    return out


def _face_adjacency(faces):
    """Pairs of face indices sharing an edge, each pair once."""
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    fid = np.tile(np.arange(len(faces)), 3)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    e = edges[order]
    f = fid[order]
    same = (e[1:] == e[:-1]).all(axis=1)
    return np.column_stack([f[:-1][same], f[1:][same]])


def _bilinear_weights(t, grid):
    """Bilinear interpolation matrix for points given in lattice units.

    ``t`` holds coordinates in [0, grid-1]^2; each row of the result spreads
    a point over its four surrounding lattice nodes.
    """
    i0 = np.clip(np.floor(t).astype(np.int64), 0, grid - 2)
    f = t - i0
    rows = np.repeat(np.arange(len(t)), 4)
    cols = np.empty(4 * len(t), dtype=np.int64)
    vals = np.empty(4 * len(t))
    k = 0
    for dy in (0, 1):
        for dx in (0, 1):
            cols[k::4] = (i0[:, 1] + dy) * grid + (i0[:, 0] + dx)
            vals[k::4] = (np.where(dx, f[:, 0], 1 - f[:, 0])
                          * np.where(dy, f[:, 1], 1 - f[:, 1]))
            k += 1
    return sparse.csr_matrix((vals, (rows, cols)), shape=(len(t), grid * grid))


def _control_basis(uv, grid):
    """Bilinear spread matrix from a grid x grid control lattice to faces.

    Controls are laid over the mesh bounding box; each face centroid takes a
    convex combination of its four surrounding controls, so the coefficient
    field is continuous and the parameterization has ~grid^2 unknowns
    regardless of mesh density.
    """
    lo, hi = uv.bbox()
    span = np.maximum(hi - lo, np.finfo(float).tiny)
    cent = uv.points[uv.faces].mean(axis=1)
    W = _bilinear_weights((cent - lo) / span * (grid - 1), grid)
    colsum = np.asarray(W.sum(axis=0)).ravel()
    active = np.nonzero(colsum > 1e-12)[0]
    # mass-normalized transpose: averages a per-face field back onto controls
    S = sparse.diags(1.0 / np.maximum(colsum, 1e-12)) @ W.T.tocsr()
    return W, S, active


def _descent_basis(control_grid, gradient_grid, active):
    """Columns spread a coarse descent lattice onto the control lattice.

    Finite-difference probing pays one solve per probe, so the descent runs
    on a handful of smooth directions rather than on individual controls;
    columns not touching any active control are dropped.
    """
    ix, iy = np.meshgrid(np.arange(control_grid), np.arange(control_grid))
    t = np.column_stack([ix.ravel(), iy.ravel()]) / (control_grid - 1)
    B = _bilinear_weights(t * (gradient_grid - 1), gradient_grid).tocsc()
    keep = np.zeros(control_grid ** 2, dtype=bool)
    keep[active] = True
    touch = np.asarray(B[keep].sum(axis=0)).ravel() > 1e-12
    return B[:, np.nonzero(touch)[0]]


def _covered_pixels(image, stride):
    """UV coordinates and pixel values of covered template pixels."""
    cov = image.coverage[::stride, ::stride]
    rows, cols = np.nonzero(cov)
    rows = rows * stride
    cols = cols * stride
    uv = image.pixel_to_uv(np.column_stack([cols, rows]).astype(np.float64))
    return uv, image.pixels[rows, cols]


def _image_gain(image):
    """Reciprocal robust scale of the covered curvature values.

    Both images in the mismatch term are multiplied by the template's gain,
    which makes the term dimensionless: the objective cannot depend on the
    units the curvature channel happens to be stored in.
    """
    v = image.pixels[image.coverage]
    if len(v) == 0:
        return 1.0
    med = float(np.median(np.abs(v)))
    return 1.0 / med if med > 1e-12 else 1.0


def _curvature_pullback(plmap, image_moving, pix_uv, pix_val, gain=1.0):
    """Mean squared curvature mismatch over the warped overlap.

    The moving image is pulled back through the map onto template pixels:
    each covered template pixel is located in the warped moving mesh, its
    preimage is sampled bilinearly in the moving image, and pixels that land
    outside either support drop out of the mean.
    """
    warped = UVMesh(plmap.image, plmap.domain.faces, validate=False)
    loc = PointLocator(warped)
    fcs, bary = loc.locate(pix_uv)
    inside = fcs >= 0
    if not inside.any():
        return 0.0, 0
    pre = np.einsum("pi,pij->pj", bary[inside],
                    plmap.domain.points[plmap.domain.faces[fcs[inside]]])
    vals, wts = image_moving.sample(pre)
    ok = wts >= 0.5
    count = int(ok.sum())
    if count == 0:
        return 0.0, 0
    diff = (pix_val[inside][ok] - vals[ok]) * gain
    return float((diff * diff).mean()), count


@dataclass(frozen=True)
class _RawTerms:
    """Unweighted loss ingredients, kept separate so weight schedules can
    recombine them without re-solving."""

    coefficient: float
    smoothness: float
    landmark: float
    curvature: float
    overlap_count: int
    flipped: int

    def combine(self, cfg, curvature_weight):
        return RegLoss(
            coefficient=cfg.coefficient_weight * self.coefficient,
            smoothness=cfg.smoothness_weight * self.smoothness,
            landmark=cfg.landmark_weight * self.landmark,
            curvature=curvature_weight * self.curvature,
            overlap_count=self.overlap_count,
            empty_overlap=self.overlap_count == 0,
        )


def reg_loss(mu, plmap, pred_landmarks, target_landmarks, image_moving,
             image_template, config=None):
    """Weighted objective of a candidate registration state.

    Components: mean squared coefficient modulus, mean squared coefficient
    difference across adjacent faces, existence-weighted mean squared
    landmark displacement, and mean squared curvature mismatch over the
    warped overlap (zero, with the ``empty_overlap`` flag set, when the
    overlap is empty or images are not supplied).
    """
    cfg = (config or RegistrationConfig()).validate()
    mu = mu if isinstance(mu, BeltramiField) else BeltramiField(mu)
    n = max(len(mu), 1)
    coeff = float((np.abs(mu.values) ** 2).sum()) / n
    smooth = 0.0
    if plmap is not None and len(mu) == len(plmap.domain.faces):
        adj = _face_adjacency(plmap.domain.faces)
        if len(adj):
            d = mu.values[adj[:, 0]] - mu.values[adj[:, 1]]
            smooth = float((np.abs(d) ** 2).sum()) / n
    lm = 0.0
    if (pred_landmarks is not None and target_landmarks is not None
            and len(pred_landmarks)):
        if len(pred_landmarks) != len(target_landmarks):
            raise ConfigError("landmark sets disagree in length")
        mapped, _ = evaluate_map(plmap, pred_landmarks.xy)
        w = pred_landmarks.p * target_landmarks.p
        d2 = ((mapped - target_landmarks.xy) ** 2).sum(axis=1)
        lm = float((w * w * d2).sum()) / len(pred_landmarks)
    curv = 0.0
    count = 0
    if image_moving is not None and image_template is not None and plmap is not None:
        pix_uv, pix_val = _covered_pixels(image_template, cfg.curvature_stride)
        curv, count = _curvature_pullback(plmap, image_moving, pix_uv, pix_val,
                                          gain=_image_gain(image_template))
        if count == 0:
            logger.warning("curvature overlap is empty; term contributes zero")
    raw = _RawTerms(coeff, smooth, lm, curv, count,
                    0 if plmap is None else plmap.flipped_faces())
    return raw.combine(cfg, cfg.curvature_weight)


def _overlap_mask(plmap, image_moving, image_template):
    """Boolean template-pixel mask of the warped curvature overlap."""
    shape = image_template.shape
    rows, cols = np.nonzero(image_template.coverage)
    uv = image_template.pixel_to_uv(np.column_stack([cols, rows]).astype(np.float64))
    warped = UVMesh(plmap.image, plmap.domain.faces, validate=False)
    fcs, bary = PointLocator(warped).locate(uv)
    inside = fcs >= 0
    mask = np.zeros(shape, dtype=bool)
    if not inside.any():
        return mask
    pre = np.einsum("pi,pij->pj", bary[inside],
                    plmap.domain.points[plmap.domain.faces[fcs[inside]]])
    _, wts = image_moving.sample(pre)
    sel = np.nonzero(inside)[0][wts >= 0.5]
    mask[rows[sel], cols[sel]] = True
    return mask


class _State:
    """Everything register() needs to evaluate one control vector."""

    def __init__(self, face, template, cfg):
        self.face = face
        self.cfg = cfg
        self.W, self.scatter, self.active = _control_basis(face.uv, cfg.control_grid)
        self.descent = _descent_basis(cfg.control_grid, max(cfg.gradient_grid, 2),
                                      self.active)
        self.adjacency = _face_adjacency(face.uv.faces)
        self.n_faces = face.uv.n_faces
        joint = face.landmarks.mask & template.landmarks.mask
        self.joint = joint
        self.locator = PointLocator(face.uv)
        if joint.any():
            _, verts = cKDTree(face.uv.points).query(face.landmarks.xy[joint])
            self.spring_idx = np.asarray(verts, dtype=np.int64)
            self.spring_pos = template.landmarks.xy[joint]
            self.spring_p = face.landmarks.p[joint]
        else:
            self.spring_idx = np.empty(0, dtype=np.int64)
            self.spring_pos = np.empty((0, 2))
            self.spring_p = np.empty(0)
        self.pins = None
        self.lm_pred = face.landmarks
        self.lm_target = template.landmarks
        self.lm_weight = face.landmarks.p * template.landmarks.p
        self.pix_uv, self.pix_val = _covered_pixels(template.image, cfg.curvature_stride)
        if cfg.probe_stride > 1:
            self.probe_uv, self.probe_val = _covered_pixels(
                template.image, cfg.curvature_stride * cfg.probe_stride)
        else:
            self.probe_uv, self.probe_val = self.pix_uv, self.pix_val
        self.image_moving = face.image
        self.image_template = template.image
        self.gain = _image_gain(template.image)
        self.solvers = {}
        self._face_hints = {}
        fi = face.uv.faces.ravel()
        fj = face.uv.faces[:, [1, 2, 0]].ravel()
        once = ~np.isin(fi * face.uv.n_vertices + fj,
                        fj * face.uv.n_vertices + fi)
        self.bedges = np.column_stack([fi[once], fj[once]])

    def constraints(self, boost):
        cons = Constraints()
        if len(self.spring_idx):
            cons.spring(self.spring_idx, self.spring_pos,
                        self.cfg.spring_weight * boost * self.spring_p ** 2)
        if self.pins is not None:
            cons.pin(*self.pins)
        return cons

    def solve(self, ctrl, boost):
        mu = clamp_activation(self.W @ ctrl)
        solver = self.solvers.get(boost)
        if solver is None:
            solver = MapSolver(self.face.uv, self.constraints(boost))
            self.solvers[boost] = solver
        # transient fold-overs while springs are stiff are expected and get
        # rejected by the line search, so no flip warning on loop solves
        plm = solver.probe(mu)
        return mu, plm

    def raw_terms(self, mu, plm, probe=False, frozen=False):
        coeff = float((np.abs(mu.values) ** 2).sum()) / self.n_faces
        d = mu.values[self.adjacency[:, 0]] - mu.values[self.adjacency[:, 1]]
        smooth = float((np.abs(d) ** 2).sum()) / self.n_faces
        mapped, _ = evaluate_map(plm, self.lm_pred.xy, locator=self.locator)
        d2 = ((mapped - self.lm_target.xy) ** 2).sum(axis=1)
        lm = float((self.lm_weight ** 2 * d2).sum()) / max(len(self.lm_pred), 1)
        curv, count = self._pullback(plm, probe, frozen)
        return _RawTerms(coeff, smooth, lm, curv, count, plm.flipped_faces())

    def _pullback(self, plm, probe, frozen=False):
        """Curvature mismatch with pixel-location reuse across candidates.

        Candidate warps move a little between evaluations, so each pixel is
        first re-tested in the face that contained it last time (exact when
        it is still inside). Pixels that were outside are screened with a
        crossing-parity test against the warped boundary; only escapees and
        re-entries pay for fresh point location. ``frozen`` keeps the outside
        set fixed, which finite-difference probes use so their differences
        see the exact same pixel set as the base they perturb.
        """
        uvs, vals = ((self.probe_uv, self.probe_val) if probe
                     else (self.pix_uv, self.pix_val))
        faces = self.face.uv.faces
        pts = plm.image
        fcs = self._face_hints.get(probe)
        if fcs is None:
            frozen = False
            fcs = np.full(len(uvs), -1, dtype=np.int64)
        tri = pts[faces[fcs]]
        m0 = tri[:, 1] - tri[:, 0]
        m1 = tri[:, 2] - tri[:, 0]
        det = m0[:, 0] * m1[:, 1] - m0[:, 1] * m1[:, 0]
        safe = np.where(np.abs(det) > 1e-300, det, 1.0)
        d = uvs - tri[:, 0]
        w1 = (d[:, 0] * m1[:, 1] - d[:, 1] * m1[:, 0]) / safe
        w2 = (m0[:, 0] * d[:, 1] - m0[:, 1] * d[:, 0]) / safe
        bary = np.column_stack([1.0 - w1 - w2, w1, w2])
        held = (fcs >= 0) & (np.abs(det) > 1e-300) & (bary.min(axis=1) >= -1e-9)
        relocate = ~held
        out = fcs < 0
        if out.any():
            relocate = relocate.copy()
            if frozen:
                relocate[out] = False
            else:
                relocate[out] = self._reentered(pts, uvs[out])
        if relocate.any():
            loc = PointLocator(UVMesh(pts, faces, validate=False))
            f_new, b_new = loc.locate(uvs[relocate])
            fcs = fcs.copy()
            fcs[relocate] = f_new
            bary[relocate] = b_new
        self._face_hints[probe] = fcs
        inside = fcs >= 0
        if not inside.any():
            return 0.0, 0
        pre = np.einsum("pi,pij->pj", bary[inside],
                        self.face.uv.points[faces[fcs[inside]]])
        mv, wts = self.image_moving.sample(pre)
        ok = wts >= 0.5
        count = int(ok.sum())
        if count == 0:
            return 0.0, 0
        diff = (vals[inside][ok] - mv[ok]) * self.gain
        return float((diff * diff).mean()), count

    def _reentered(self, pts, p):
        """Crossing-parity containment of points against the warped boundary."""
        a = pts[self.bedges[:, 0]]
        b = pts[self.bedges[:, 1]]
        spans = (a[None, :, 1] > p[:, None, 1]) != (b[None, :, 1] > p[:, None, 1])
        dy = np.where(spans, b[None, :, 1] - a[None, :, 1], 1.0)
        t = (p[:, None, 1] - a[None, :, 1]) / dy
        xint = a[None, :, 0] + t * (b[None, :, 0] - a[None, :, 0])
        crossing = spans & (xint > p[:, None, 0])
        return (crossing.sum(axis=1) % 2) == 1

    def evaluate(self, ctrl, boost, probe=False, frozen=False):
        mu, plm = self.solve(ctrl, boost)
        return mu, plm, self.raw_terms(mu, plm, probe=probe, frozen=frozen)


def _term_value(raw, cfg, curvature_weight, components):
    loss = raw.combine(cfg, curvature_weight)
    if components is None:
        return loss.total
    return sum(getattr(loss, name) for name in components)


def _fd_gradient(state, ctrl, basis, boost, curvature_weight, components=None,
                 step=None, centered=False):
    """Finite-difference gradient of the objective along basis directions.

    ``basis`` columns are nonnegative spreads over the control lattice; the
    result holds one complex number per column, d/dRe + i d/dIm of the
    objective along it. Forward differences share the unperturbed
    evaluation; probes run in a fixed order so the reduction is
    deterministic.
    """
    cfg = state.cfg
    h = cfg.gradient_step if step is None else step
    ncols = basis.shape[1]
    dense = basis.toarray() if sparse.issparse(basis) else np.asarray(basis)
    base = None
    if not centered:
        _, _, raw0 = state.evaluate(ctrl, boost, probe=True)
        base = _term_value(raw0, cfg, curvature_weight, components)
    grad = np.zeros(ncols, dtype=np.complex128)
    for j in range(ncols):
        v = dense[:, j]
        for unit in (1.0, 1j):
            _, _, raw = state.evaluate(ctrl + h * unit * v, boost,
                                       probe=True, frozen=True)
            plus = _term_value(raw, cfg, curvature_weight, components)
            if centered:
                _, _, raw = state.evaluate(ctrl - h * unit * v, boost,
                                           probe=True, frozen=True)
                minus = _term_value(raw, cfg, curvature_weight, components)
                grad[j] += unit * (plus - minus) / (2 * h)
            else:
                grad[j] += unit * (plus - base) / h
    return grad


def register(face, template, config=None):
    """Register a partial face onto a template.

    Needs at least three landmarks present on both sides, or failing that a
    non-empty curvature overlap under a rigid coarse alignment; otherwise the
    problem is under-constrained. Returns the best-loss iterate found.
    """
    cfg = (config or RegistrationConfig()).validate()
    state = _State(face, template, cfg)
    m = int(state.joint.sum())
    if m < 3:
        align = coarse_align(face.image, template.image)
        rot = align.rotation
        # inverse of the rigid guess carries moving UV into the template frame
        init = (face.uv.points - align.center) @ rot + align.anchor
        plm0 = PiecewiseLinearMap(face.uv, init)
        curv, count = _curvature_pullback(
            plm0, face.image, state.probe_uv, state.probe_val)
        if count == 0:
            raise UnderConstrainedError(
                "under-constrained: fewer than 3 shared landmarks and no "
                "curvature overlap")
        # gauge: pin the two most distant boundary vertices at their aligned
        # positions, otherwise the solve is translation-deficient
        bidx = np.nonzero(face.uv.boundary_vertex_mask())[0]
        bpts = face.uv.points[bidx]
        far = int(np.argmax(((bpts - bpts[0]) ** 2).sum(axis=1)))
        pick = bidx[[0, far]]
        state.pins = (pick, init[pick])

    ctrl = np.zeros(cfg.control_grid ** 2, dtype=np.complex128)
    warm = max(cfg.warmup, 1)

    def schedule(k):
        boost = cfg.warmup_spring_boost if k < cfg.warmup else 1.0
        curv_w = cfg.curvature_weight * min(1.0, k / warm)
        return boost, curv_w

    boost, curv_w = schedule(0)
    mu, plm, raw = state.evaluate(ctrl, boost)
    trace = [raw.combine(cfg, curv_w)]
    totals = [trace[0].total]
    # relative progress is judged over one full descent cycle, otherwise a
    # cheap blend-only iteration between gradient probes would look converged
    window = max(cfg.gradient_every, 1)

    def full_key(raw):
        loss = raw.combine(cfg, cfg.curvature_weight)
        return (raw.flipped > 0, loss.total)

    best = (full_key(raw), ctrl.copy(), mu, plm, raw)
    converged = False
    descent_dir = None
    refresh_next = False
    t_start = 1.0
    k = 0
    for k in range(1, cfg.max_iterations + 1):
        boost, curv_w = schedule(k)
        base_key = (raw.flipped > 0, raw.combine(cfg, curv_w).total)

        induced = beltrami_from_map(plm)
        target = state.scatter @ _inverse_activation(induced.values)
        blend_delta = cfg.blend * (target - ctrl)
        if (cfg.gradient_every and k >= cfg.warmup and state.descent.shape[1]
                and ((k - cfg.warmup) % cfg.gradient_every == 0 or refresh_next)):
            grad = _fd_gradient(state, ctrl, state.descent, boost, curv_w)
            descent_dir = state.descent @ grad
            refresh_next = False
        # the descent direction persists between gradient refreshes; when a
        # stale (or useless) push defeats the line search, fall back to the
        # blend step alone and refresh the gradient next iteration
        deltas = [blend_delta]
        if descent_dir is not None:
            gmax = np.abs(descent_dir).max()
            if gmax > 1e-12:
                deltas.insert(0, blend_delta - cfg.gradient_scale * descent_dir / gmax)

        accepted = None
        for attempt, delta in enumerate(deltas):
            # start near the last accepted step size so a shrinking trust
            # region does not re-pay rejected full evaluations every iteration
            t = t_start if attempt == 0 else 1.0
            for _ in range(cfg.max_halvings + 1):
                trial = ctrl + t * delta
                mu_t, plm_t, raw_t = state.evaluate(trial, boost)
                key_t = (raw_t.flipped > 0, raw_t.combine(cfg, curv_w).total)
                if key_t <= base_key:
                    accepted = (trial, mu_t, plm_t, raw_t)
                    break
                t *= 0.5
            if accepted is not None:
                if attempt == 0:
                    t_start = min(1.0, 2.0 * t)
                else:
                    descent_dir = None
                    refresh_next = True
                break
        if accepted is None:
            trace.append(raw.combine(cfg, curv_w))
            converged = True
            break
        ctrl, mu, plm, raw = accepted
        loss_k = raw.combine(cfg, curv_w)
        trace.append(loss_k)
        totals.append(loss_k.total)
        key = full_key(raw)
        if key < best[0]:
            best = (key, ctrl.copy(), mu, plm, raw)
        if loss_k.total <= cfg.abs_tol:
            converged = True
            break
        if k >= cfg.warmup + window:
            ref = totals[k - window]
            rel = (ref - totals[k]) / max(abs(ref), 1e-30)
            if rel < cfg.rel_tol:
                converged = True
                break

    _, ctrl, mu, plm, raw = best
    mu_star = beltrami_from_map(plm)
    mapped, _ = evaluate_map(plm, face.landmarks.xy, locator=state.locator)
    registered = LandmarkSet(mapped, face.landmarks.p)
    overlap = _overlap_mask(plm, face.image, template.image)
    trace_arr = np.array([
        [r.coefficient, r.smoothness, r.landmark, r.curvature, r.total]
        for r in trace
    ])
    result = RegistrationResult(
        mu_star=mu_star,
        map=plm,
        registered_landmarks=registered,
        trace=trace_arr,
        overlap_mask=overlap,
        landmark_mask=state.joint.copy(),
        iterations=k,
        converged=converged,
        empty_overlap=raw.overlap_count == 0,
    )
    if raw.flipped:
        logger.warning("returned map has %d flipped faces", raw.flipped)
    return result


def cross_register(r1, r2):
    """Map the first partial onto the second through the shared template.

    Composes the first registration with the inverse of the second and
    reports which template landmarks both partials carry.
    """
    composed = compose_maps(r1.map, invert_map(r2.map))
    shared = np.nonzero(r1.landmark_mask & r2.landmark_mask)[0]
    return CrossRegistration(
        map=composed,
        shared_landmarks=shared,
        vertex_overlap=np.asarray(composed.overlap_mask, dtype=bool),
    )
