import numpy as np
import pytest

from conftest import disk_uv, grid_faces, grid_points
from qcface.errors import ConfigError, InvalidMeshError
from qcface.landmarks import (
    CurvatureImage,
    LandmarkSet,
    build_template,
    detect,
    ld_loss,
    load_landmarks,
    load_pgm,
    rasterize,
    save_landmarks,
    save_pgm,
)
from qcface.mesh import UVMesh
from qcface.param import parameterize
from qcface.synth import HalfPlane, cut_holes, cut_partial, generate, template_identity


@pytest.fixture(scope="module")
def face_template():
    """Template identity flattened and turned into a detection template."""
    tmpl = template_identity()
    tuv = parameterize(tmpl.mesh)
    return tmpl, tuv, build_template(tuv, tuv.points[tmpl.landmark_vertices])


def constant_disk(n=16, value=2.5):
    base = disk_uv(n)
    return UVMesh(base.points, base.faces, curvature=np.full(base.n_vertices, value))


class TestRasterize:
    def test_constant_channel_fills_coverage(self):
        img = rasterize(constant_disk(value=2.5), resolution=64)
        assert np.allclose(img.pixels[img.coverage], 2.5)
        assert (img.pixels[~img.coverage] == 0.0).all()

    def test_coverage_fraction_matches_disk_area(self):
        img = rasterize(constant_disk(n=40), resolution=128)
        expected = np.pi * img.scale**2 / (128 * 128)
        assert abs(img.coverage.mean() - expected) / expected < 0.02

    def test_linear_field_reproduced_in_interior(self):
        n = 21
        pts = grid_points(n)
        field = 2.0 * pts[:, 0] - 3.0 * pts[:, 1] + 0.5
        uv = UVMesh(pts, grid_faces(n), curvature=field)
        img = rasterize(uv, resolution=128, smoothing=0.0)
        inner = np.all((pts > 0.15) & (pts < 0.85), axis=1)
        vals, wts = img.sample(pts[inner])
        assert np.allclose(vals, field[inner], atol=1e-12)
        assert np.allclose(wts, 1.0)

    def test_sample_outside_frame_is_zero(self):
        img = rasterize(constant_disk(), resolution=64)
        vals, wts = img.sample(np.array([[50.0, -40.0]]))
        assert vals[0] == 0.0 and wts[0] == 0.0

    def test_pixel_uv_transforms_invert(self):
        img = rasterize(constant_disk(), resolution=64)
        px = np.array([[3.25, 40.5], [0.0, 0.0]])
        assert np.allclose(img.uv_to_pixel(img.pixel_to_uv(px)), px)

    def test_requires_curvature_channel(self):
        with pytest.raises(ConfigError):
            rasterize(disk_uv(8))

    def test_resolution_floor(self):
        with pytest.raises(ConfigError):
            rasterize(constant_disk(), resolution=8)

    def test_empty_mesh_rejected(self):
        empty = UVMesh(
            np.zeros((3, 2)),
            np.zeros((0, 3), dtype=int),
            curvature=np.zeros(3),
            validate=False,
        )
        with pytest.raises(InvalidMeshError):
            rasterize(empty)


class TestLandmarkSet:
    def test_mask_threshold_is_strict(self):
        ls = LandmarkSet(np.zeros((2, 2)), np.array([0.9, 0.90001]))
        assert list(ls.mask) == [False, True]

    def test_validation(self):
        with pytest.raises(ConfigError):
            LandmarkSet(np.zeros((2, 2)), np.array([0.5, 1.2]))
        with pytest.raises(ConfigError):
            LandmarkSet(np.array([[np.nan, 0.0]]), np.array([0.5]))
        with pytest.raises(ConfigError):
            LandmarkSet(np.zeros((3, 2)), np.array([0.5, 0.5]))

    def test_json_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        ls = LandmarkSet(rng.standard_normal((68, 2)), rng.uniform(size=68))
        path = tmp_path / "lm.json"
        save_landmarks(ls, path)
        back = load_landmarks(path)
        assert np.array_equal(back.xy, ls.xy)
        assert np.array_equal(back.p, ls.p)


class TestDetect:
    def test_self_detection(self, face_template):
        tmpl, tuv, template = face_template
        assert template.patch_vals.shape == (68, 21, 21)
        det = detect(template.image, template)
        assert det.mask.all()
        err = np.linalg.norm(
            (det.xy - tuv.points[tmpl.landmark_vertices]) * template.image.scale,
            axis=1,
        )
        assert np.sqrt((err**2).mean()) < 2.0

    def test_nose_cut_masks_nose_only(self, face_template):
        tmpl, tuv, template = face_template
        part = cut_holes(tmpl, 1, radius_range=(0.33, 0.33), centers=[(0.0, 0.02)])
        det = detect(rasterize(parameterize(part.mesh)), template)
        nose = np.arange(27, 36)
        others = np.setdiff1d(np.arange(68), nose)
        assert (det.p[nose] <= 0.9).all()
        assert det.mask[others].all()

    def test_blank_image_all_absent(self, face_template):
        _, _, template = face_template
        blank = CurvatureImage(
            pixels=np.zeros((64, 64)),
            coverage=np.zeros((64, 64), dtype=bool),
            origin=np.zeros(2),
            scale=50.0,
        )
        det = detect(blank, template)
        assert (det.p == 0.0).all()
        assert np.isfinite(det.xy).all()

    def test_translation_equivariance(self, face_template):
        _, _, template = face_template
        img = template.image
        dy, dx = 5, -7
        rolled = CurvatureImage(
            pixels=np.roll(img.pixels, (dy, dx), axis=(0, 1)),
            coverage=np.roll(img.coverage, (dy, dx), axis=(0, 1)),
            origin=img.origin,
            scale=img.scale,
        )
        base = detect(img, template)
        moved = detect(rolled, template)
        assert (base.mask == moved.mask).all()
        delta = (moved.xy - base.xy) * img.scale
        assert np.abs(delta - np.array([dx, dy])).max() <= 1.0

    @pytest.mark.parametrize("degrees", [45.0, 90.0])
    def test_rotated_content_recovered(self, face_template, degrees):
        tmpl, tuv, template = face_template
        th = np.deg2rad(degrees)
        rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        spun = UVMesh(
            tuv.points @ rot.T, tuv.faces, curvature=tuv.curvature, validate=False
        )
        img = rasterize(spun)
        det = detect(img, template)
        assert det.mask.all()
        truth = tuv.points[tmpl.landmark_vertices] @ rot.T
        err = np.linalg.norm((det.xy - truth) * img.scale, axis=1)
        assert err.max() < 4.0

    def test_mask_monotone_under_growing_cut(self, face_template):
        _, _, template = face_template
        a = 0.85
        for seed in (3, 4, 11):
            ident = generate(seed)
            small = cut_partial(ident, HalfPlane(1.0, 0.0, 0.4 * a), name="small")
            big = cut_partial(ident, HalfPlane(1.0, 0.0, 0.1 * a), name="big")
            det_s = detect(rasterize(parameterize(small.mesh)), template)
            det_b = detect(rasterize(parameterize(big.mesh)), template)
            inside_cut = ~small.landmark_mask
            assert not (inside_cut & ~det_s.mask & det_b.mask).any()


class TestLdLoss:
    def test_exact_match_is_zero(self):
        rng = np.random.default_rng(0)
        xy = rng.standard_normal((10, 2))
        p = (rng.uniform(size=10) > 0.5).astype(float)
        assert ld_loss(LandmarkSet(xy, p), LandmarkSet(xy, p)) == 0.0

    def test_cross_entropy_closed_form(self):
        xy = np.zeros((4, 2))
        truth = LandmarkSet(xy, np.ones(4))
        pred = LandmarkSet(xy, np.full(4, 0.5))
        assert np.isclose(ld_loss(pred, truth, alpha=2.0, beta=3.0), 2.0 * np.log(2.0))

    def test_absent_landmarks_ignore_location(self):
        truth = LandmarkSet(np.zeros((2, 2)), np.array([1.0, 0.0]))
        near = LandmarkSet(np.zeros((2, 2)), np.array([1.0, 0.0]))
        far = LandmarkSet(np.array([[0.0, 0.0], [99.0, -5.0]]), np.array([1.0, 0.0]))
        assert ld_loss(near, truth) == ld_loss(far, truth)

    def test_location_term_scales_with_distance(self):
        truth = LandmarkSet(np.zeros((1, 2)), np.ones(1))
        off = LandmarkSet(np.array([[3.0, 4.0]]), np.ones(1))
        assert np.isclose(ld_loss(off, truth, alpha=0.0, beta=2.0), 10.0)

    def test_soft_truth_rejected(self):
        ls = LandmarkSet(np.zeros((2, 2)), np.array([1.0, 0.5]))
        with pytest.raises(ConfigError):
            ld_loss(ls, ls)

    def test_length_mismatch_rejected(self):
        a = LandmarkSet(np.zeros((2, 2)), np.ones(2))
        b = LandmarkSet(np.zeros((3, 2)), np.ones(3))
        with pytest.raises(ConfigError):
            ld_loss(a, b)

    def test_nonnegative_on_random_inputs(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            n = int(rng.integers(1, 12))
            truth = LandmarkSet(
                rng.standard_normal((n, 2)),
                (rng.uniform(size=n) > 0.4).astype(float),
            )
            pred = LandmarkSet(rng.standard_normal((n, 2)), rng.uniform(size=n))
            assert ld_loss(pred, truth) >= 0.0


class TestPgm:
    def test_round_trip_within_quantization(self, tmp_path):
        img = rasterize(constant_disk(n=24), resolution=64)
        img.pixels[img.coverage] += np.linspace(
            -1.0, 1.0, int(img.coverage.sum())
        ).reshape(-1)
        path = tmp_path / "img.pgm"
        save_pgm(img, path)
        values, (vmin, vmax) = load_pgm(path)
        assert vmin == img.pixels.min() and vmax == img.pixels.max()
        assert np.abs(values - img.pixels).max() <= (vmax - vmin) / 65535

    def test_corrupt_header_rejected(self, tmp_path):
        path = tmp_path / "bad.pgm"
        path.write_bytes(b"P5\nno range here\n4 4\n65535\n" + b"\x00" * 32)
        with pytest.raises(ConfigError):
            load_pgm(path)
