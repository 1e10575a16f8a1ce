"""Curvature images and classical landmark detection with existence masks.

A flattened face becomes a raster of its mean-curvature channel; landmarks
are found by correlating per-landmark template patches over a search window
and thresholding the correlation-derived probability. Uncovered pixels stay
exactly zero so missing regions read as absent rather than flat.
"""

import json
import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, signal

from .errors import ConfigError, InvalidMeshError
from .solver import PointLocator

logger = logging.getLogger(__name__)

DEFAULT_RESOLUTION = 256
PATCH_RADIUS = 10
SEARCH_RADIUS = 16
MASK_THRESHOLD = 0.9
MIN_COVERED_FRACTION = 0.5
CENTER_COVER_GATE = 0.35
SMOOTHING_SIGMA = 1.0


@dataclass
class CurvatureImage:
    """Raster of a curvature channel with coverage and the UV-pixel transform.

    uv = origin + (col, row) / scale; the scale is isotropic so patch
    correlation sees square pixels.
    """

    pixels: np.ndarray
    coverage: np.ndarray
    origin: np.ndarray
    scale: float

    @property
    def shape(self):
        return self.pixels.shape

    def uv_to_pixel(self, uv):
        return (np.asarray(uv, dtype=np.float64) - self.origin) * self.scale

    def pixel_to_uv(self, px):
        return np.asarray(px, dtype=np.float64) / self.scale + self.origin

    def sample(self, uv):
        """Bilinear values and coverage weights at UV points.

        Outside the frame both are 0; partially covered neighborhoods get a
        fractional weight, which downstream correlation treats as a soft mask.
        """
        px = self.uv_to_pixel(np.atleast_2d(uv))
        h, w = self.pixels.shape
        x = px[:, 0]
        y = px[:, 1]
        x0 = np.floor(x).astype(np.int64)
        y0 = np.floor(y).astype(np.int64)
        fx = x - x0
        fy = y - y0
        vals = np.zeros(len(px))
        wts = np.zeros(len(px))
        cov = self.coverage.astype(np.float64)
        for dy in (0, 1):
            for dx in (0, 1):
                xi = x0 + dx
                yi = y0 + dy
                ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
                c = np.where(dx, fx, 1 - fx) * np.where(dy, fy, 1 - fy)
                xi_s = np.clip(xi, 0, w - 1)
                yi_s = np.clip(yi, 0, h - 1)
                vals += np.where(ok, c * self.pixels[yi_s, xi_s], 0.0)
                wts += np.where(ok, c * cov[yi_s, xi_s], 0.0)
        return vals, wts


def rasterize(uv, resolution=DEFAULT_RESOLUTION, smoothing=SMOOTHING_SIGMA):
    """Raster the curvature channel over the UV bbox with a 5% margin.

    Pixel values are barycentric interpolations of vertex curvature, then a
    Gaussian smooth normalized by coverage; pixels whose center lies in no
    triangle are exactly 0 and flagged uncovered.
    """
    if uv.curvature is None:
        raise ConfigError("mesh has no curvature channel to rasterize")
    if uv.n_faces == 0:
        raise InvalidMeshError("cannot rasterize an empty mesh")
    if resolution < 16:
        raise ConfigError(f"resolution {resolution} too small")
    h = w = int(resolution)
    lo, hi = uv.bbox()
    span = np.maximum(hi - lo, 1e-12)
    scale = min((w - 1) / (1.1 * span[0]), (h - 1) / (1.1 * span[1]))
    center = 0.5 * (lo + hi)
    origin = center - 0.5 * np.array([w - 1, h - 1]) / scale
    xs = origin[0] + np.arange(w) / scale
    ys = origin[1] + np.arange(h) / scale
    pts = np.column_stack([np.tile(xs, h), np.repeat(ys, w)])
    faces, bary = PointLocator(uv).locate(pts)
    inside = faces >= 0
    vals = np.zeros(len(pts))
    corner_h = uv.curvature[uv.faces[faces[inside]]]
    vals[inside] = (corner_h * bary[inside]).sum(axis=1)
    pixels = vals.reshape(h, w)
    coverage = inside.reshape(h, w)

    num = ndimage.gaussian_filter(pixels * coverage, smoothing, mode="constant")
    den = ndimage.gaussian_filter(
        coverage.astype(np.float64), smoothing, mode="constant"
    )
    smoothed = np.where(coverage, num / np.maximum(den, 1e-12), 0.0)
    return CurvatureImage(
        pixels=smoothed, coverage=coverage, origin=origin, scale=scale
    )


@dataclass
class LandmarkSet:
    """Landmark locations (UV) with existence probabilities."""

    xy: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=np.float64)
        self.p = np.asarray(self.p, dtype=np.float64)
        if self.xy.shape != (len(self.p), 2):
            raise ConfigError("landmark locations and probabilities disagree in length")
        if not np.isfinite(self.xy).all():
            raise ConfigError("landmark locations must be finite")
        if ((self.p < 0) | (self.p > 1)).any():
            raise ConfigError("landmark probabilities must lie in [0, 1]")

    def __len__(self):
        return len(self.p)

    @property
    def mask(self):
        return self.p > MASK_THRESHOLD


def _fmt(x):
    return f"{x:.17g}"


def save_landmarks(ls, path):
    rows = ",\n".join(
        f'    {{"id": {i}, "x": {_fmt(x)}, "y": {_fmt(y)}, "p": {_fmt(p)}}}'
        for i, ((x, y), p) in enumerate(zip(ls.xy, ls.p))
    )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write('{\n  "landmarks": [\n' + rows + "\n  ]\n}\n")


def load_landmarks(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    entries = sorted(doc["landmarks"], key=lambda e: e["id"])
    xy = np.array([[e["x"], e["y"]] for e in entries], dtype=np.float64)
    p = np.array([e["p"] for e in entries], dtype=np.float64)
    return LandmarkSet(xy, p)


@dataclass
class LandmarkTemplate:
    """Per-landmark correlation patches cut from the template's image."""

    image: CurvatureImage
    landmark_uv: np.ndarray
    patch_vals: np.ndarray
    patch_wts: np.ndarray
    patch_radius: int


def _sample_lattice(image, center, radius, pitch):
    offs = np.arange(-radius, radius + 1) * pitch
    gx, gy = np.meshgrid(center[0] + offs, center[1] + offs)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    vals, wts = image.sample(pts)
    k = 2 * radius + 1
    return vals.reshape(k, k), wts.reshape(k, k)


def build_template(uv, landmark_uv, resolution=DEFAULT_RESOLUTION, patch_radius=PATCH_RADIUS):
    image = rasterize(uv, resolution)
    landmark_uv = np.asarray(landmark_uv, dtype=np.float64)
    pitch = 1.0 / image.scale
    vals = []
    wts = []
    for c in landmark_uv:
        v, m = _sample_lattice(image, c, patch_radius, pitch)
        vals.append(v)
        wts.append(m)
    return LandmarkTemplate(
        image=image,
        landmark_uv=landmark_uv,
        patch_vals=np.array(vals),
        patch_wts=np.array(wts),
        patch_radius=patch_radius,
    )


def _masked_ncc(win_vals, win_wts, pat_vals, pat_wts, min_count):
    """Correlation scores of the patch at every placement inside the window.

    Weighted Pearson correlation over the joint support; placements whose
    joint support is below min_count (or degenerate) score 0.
    """

    def corr(a, b):
        return signal.correlate(a, b, mode="valid", method="auto")

    c = corr(win_wts, pat_wts)
    sw = corr(win_vals * win_wts, pat_wts)
    st = corr(win_wts, pat_vals * pat_wts)
    sww = corr(win_vals**2 * win_wts, pat_wts)
    stt = corr(win_wts, pat_vals**2 * pat_wts)
    swt = corr(win_vals * win_wts, pat_vals * pat_wts)
    valid = c > max(min_count, 1e-9)
    cs = np.where(valid, c, 1.0)
    num = swt - sw * st / cs
    varw = np.maximum(sww - sw**2 / cs, 0.0)
    vart = np.maximum(stt - st**2 / cs, 0.0)
    den = np.sqrt(varw * vart)
    good = valid & (den > 1e-15)
    return np.where(good, np.clip(num / np.where(good, den, 1.0), -1.0, 1.0), 0.0)


def _covered_centroid(image):
    rows, cols = np.nonzero(image.coverage)
    if len(rows) == 0:
        return None
    return image.pixel_to_uv(np.array([cols.mean(), rows.mean()]))


def _rot(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass
class _CoarseAlign:
    """Similarity-free rigid guess: image_uv = center + R @ (template_uv - anchor)."""

    anchor: np.ndarray
    center: np.ndarray
    rotation: np.ndarray

    def __call__(self, uv):
        return self.center + (np.atleast_2d(uv) - self.anchor) @ self.rotation.T


def _align_score(image, template_image, align, down):
    h, w = template_image.shape
    pitch = down / template_image.scale
    xs = np.arange(w // down) * pitch + template_image.origin[0]
    ys = np.arange(h // down) * pitch + template_image.origin[1]
    pts = align(np.column_stack([np.tile(xs, len(ys)), np.repeat(ys, len(xs))]))
    vals, wts = image.sample(pts)
    a = vals.reshape(len(ys), len(xs))
    aw = wts.reshape(len(ys), len(xs))

    b = template_image.pixels[::down, ::down]
    bw = template_image.coverage[::down, ::down].astype(np.float64)
    # a partial's centroid can sit far from where its content lies on the
    # template, so the translation reach must cover a large fraction of the
    # frame
    pad = 16
    scores = _masked_ncc(np.pad(a, pad), np.pad(aw, pad), b, bw, 0.25 * bw.sum())
    j = int(np.argmax(scores))
    iy, ix = np.unravel_index(j, scores.shape)
    shift = pitch * np.array([ix - pad, iy - pad], dtype=np.float64)
    return float(scores.flat[j]), shift


def coarse_align(image, template_image, down=4, sweep_gate=0.75):
    """Best rigid guess mapping template UV onto image content.

    The pose frames of a partial and of the full template can differ by an
    in-plane rotation (both are right-handed seen along the outward normal,
    so never a reflection). Translation alone is tried first; only when its
    score falls below ``sweep_gate`` does a full-circle sweep search for the
    rotation, followed by one refinement pass either way.
    """
    anchor = _covered_centroid(template_image)
    center = _covered_centroid(image)
    if center is None:
        return _CoarseAlign(anchor, anchor, np.eye(2))

    def best_over(angles):
        results = []
        for theta in angles:
            align = _CoarseAlign(anchor, center, _rot(theta))
            score, shift = _align_score(image, template_image, align, down)
            results.append((score, theta, shift))
        return max(results, key=lambda r: r[0])

    score, theta, shift = best_over([0.0])
    if score < sweep_gate:
        score, theta, shift = best_over(np.deg2rad(np.arange(-180, 180, 10)))
    fine = theta + np.deg2rad(np.arange(-7.5, 8.0, 2.5))
    score, theta, shift = best_over(fine)
    rot = _rot(theta)
    return _CoarseAlign(anchor - shift, center, rot)


def detect(image, template, search_radius=SEARCH_RADIUS, align=None):
    """Find every template landmark in a curvature image.

    The search window is laid out in the template's orientation and mapped
    through the coarse alignment, so patches compare upright even when the
    image content is rotated. A placement's score is its masked correlation
    gated by coverage at the patch center: a landmark whose point is off the
    surface reads as absent even if its surroundings match. Landmarks with no
    covered placement come back with probability 0 at the coarse-aligned
    guess.
    """
    pitch = 1.0 / template.image.scale
    if align is None:
        align = coarse_align(image, template.image)
    n = len(template.landmark_uv)
    r = template.patch_radius
    xy = np.empty((n, 2))
    p = np.empty(n)
    k = 2 * search_radius + 1
    offs = np.arange(-search_radius - r, search_radius + r + 1) * pitch
    for i in range(n):
        base = template.landmark_uv[i]
        gx, gy = np.meshgrid(base[0] + offs, base[1] + offs)
        pts = align(np.column_stack([gx.ravel(), gy.ravel()]))
        vals, wts = image.sample(pts)
        win_vals = vals.reshape(len(offs), len(offs))
        win_wts = wts.reshape(len(offs), len(offs))
        min_count = MIN_COVERED_FRACTION * template.patch_wts[i].sum()
        scores = _masked_ncc(
            win_vals, win_wts, template.patch_vals[i], template.patch_wts[i], min_count
        )
        gate = np.clip(win_wts[r : r + k, r : r + k] / CENTER_COVER_GATE, 0.0, 1.0)
        scores = scores * gate
        j = int(np.argmax(scores))
        iy, ix = np.unravel_index(j, scores.shape)
        xy[i] = align(base + pitch * np.array([ix - search_radius, iy - search_radius]))
        p[i] = min(1.0, max(0.0, float(scores.flat[j]))) ** 2
    return LandmarkSet(xy, p)


def ld_loss(pred, truth, alpha=1.0, beta=1.0):
    """Detection objective: cross-entropy on existence plus masked location error.

    Location error counts only landmarks the truth marks as existing; truth
    probabilities must be hard 0/1 labels.
    """
    if len(pred) != len(truth):
        raise ConfigError("landmark sets differ in size")
    t = truth.p
    if not np.isin(t, (0.0, 1.0)).all():
        raise ConfigError("truth probabilities must be exactly 0 or 1")
    q = pred.p
    ce = -(
        t * np.log(np.maximum(q, 1e-7))
        + (1.0 - t) * np.log(np.maximum(1.0 - q, 1e-7))
    )
    loc = np.linalg.norm(pred.xy - truth.xy, axis=1) * t
    n = len(pred)
    return float(alpha / n * ce.sum() + beta / n * loc.sum())


def save_pgm(image, path):
    """16-bit PGM export; the linear value mapping is kept in a header comment."""
    vmin = float(image.pixels.min())
    vmax = float(image.pixels.max())
    span = max(vmax - vmin, np.finfo(float).tiny)
    q = np.round((image.pixels - vmin) / span * 65535).astype(">u2")
    h, w = image.pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n# range {_fmt(vmin)} {_fmt(vmax)}\n{w} {h}\n65535\n".encode())
        fh.write(q.tobytes())


def load_pgm(path):
    """Read a PGM written by save_pgm; returns (values, (vmin, vmax))."""
    with open(path, "rb") as fh:
        data = fh.read()
    lines = []
    pos = 0
    while len(lines) < 4:
        nl = data.index(b"\n", pos)
        lines.append(data[pos:nl].decode())
        pos = nl + 1
    if lines[0] != "P5" or not lines[1].startswith("# range "):
        raise ConfigError("not a curvature PGM")
    vmin, vmax = (float(t) for t in lines[1][len("# range ") :].split())
    w, h = (int(t) for t in lines[2].split())
    if lines[3] != "65535":
        raise ConfigError("expected 16-bit PGM")
    q = np.frombuffer(data[pos:], dtype=">u2").reshape(h, w).astype(np.float64)
    return vmin + q / 65535.0 * (vmax - vmin), (vmin, vmax)
