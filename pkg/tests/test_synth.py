import logging
import time

import numpy as np
import pytest

from qcface import synth
from qcface.beltrami import BeltramiField, beltrami_from_map
from qcface.errors import (
    ConfigError,
    DegeneratePartialError,
    HolePlacementError,
    InadmissibleFieldError,
)
from qcface.param import parameterize, pose_frame


@pytest.fixture(scope="module")
def ident():
    return synth.generate(3)


@pytest.fixture(scope="module")
def ident_uv(ident):
    return parameterize(ident.mesh)


class TestGenerate:
    def test_deterministic(self):
        a = synth.generate(0)
        b = synth.generate(0)
        np.testing.assert_array_equal(a.mesh.vertices, b.mesh.vertices)
        np.testing.assert_array_equal(a.mesh.faces, b.mesh.faces)
        np.testing.assert_array_equal(a.landmark_vertices, b.landmark_vertices)

    def test_seeds_give_distinct_feature_curvature(self):
        a = synth.generate(1)
        b = synth.generate(2)
        ca = a.mesh.curvature[a.landmark_vertices]
        cb = b.mesh.curvature[b.landmark_vertices]
        assert np.linalg.norm(ca - cb) > 0

    def test_flat_params_give_plane(self):
        flat = synth.generate(0, params=np.zeros(len(synth.PARAM_NAMES)))
        assert np.abs(flat.mesh.vertices[:, 2]).max() == 0
        assert np.abs(flat.mesh.curvature).max() < 1e-8

    def test_landmarks_complete_and_on_surface(self, ident):
        assert ident.landmark_vertices.shape == (synth.N_LANDMARKS,)
        assert ident.landmark_vertices.min() >= 0
        assert ident.landmark_vertices.max() < ident.mesh.n_vertices
        snap = np.linalg.norm(
            ident.mesh.vertices[ident.landmark_vertices][:, :2] - ident.landmark_xy,
            axis=1,
        )
        # snapped vertex within one lattice cell of the analytic position
        assert snap.max() < 4.0 / ident.resolution

    def test_disk_topology(self, ident):
        assert len(ident.mesh.boundary_loops()) == 1
        assert ident.mesh.genus() == 0

    def test_too_coarse_rejected(self):
        with pytest.raises(ConfigError):
            synth.generate(0, resolution=16)

    def test_pose_frame_stable_across_identities_and_cuts(self):
        # every cut of every identity must agree on the in-plane axes,
        # otherwise recognition would compare azimuths in different frames
        for seed in range(4):
            i = synth.generate(seed)
            a = synth.cut_partial(i, synth.HalfPlane(1, 0, 0.25 * synth.SEMI_AXES[0]))
            b = synth.cut_partial(i, synth.HalfPlane(-1, 0, 0.25 * synth.SEMI_AXES[0]))
            for m in (i.mesh, a.mesh, b.mesh):
                R, _ = pose_frame(m)
                assert R[0] @ np.array([0.0, 1.0, 0.0]) > 0.9
                assert R[2] @ np.array([0.0, 0.0, 1.0]) > 0.9

    def test_template_uses_midrange_features(self):
        t = synth.template_identity()
        np.testing.assert_allclose(t.params, synth.PARAM_RANGES.mean(axis=1))


class TestCutPartial:
    def test_keep_all(self, ident):
        p = synth.cut_partial(ident, synth.HalfPlane(1, 0, np.inf), "all")
        assert p.mesh.n_faces == ident.mesh.n_faces
        assert p.landmark_mask.all()

    def test_left_half_masks_right_landmarks(self, ident):
        p = synth.cut_partial(ident, synth.HalfPlane(1, 0, 0.0), "left")
        cell = 2.0 * synth.SEMI_AXES[0] / ident.resolution
        x = ident.landmark_xy[:, 0]
        assert not p.landmark_mask[x > 2 * cell].any()
        assert p.landmark_mask[x < -2 * cell].all()

    def test_surviving_positions_unchanged(self, ident):
        p = synth.cut_partial(ident, synth.HalfPlane(0, 1, 0.1), "lower")
        kept = p.landmark_mask
        np.testing.assert_array_equal(
            p.mesh.vertices[p.landmark_vertices[kept]],
            ident.mesh.vertices[ident.landmark_vertices[kept]],
        )

    def test_sliver_rejected(self, ident):
        with pytest.raises(DegeneratePartialError):
            synth.cut_partial(ident, synth.HalfPlane(1, 0, -0.8))

    def test_single_boundary_loop(self, ident):
        p = synth.cut_partial(ident, synth.HalfPlane(1, 1, 0.3), "corner")
        assert len(p.mesh.boundary_loops()) == 1
        assert p.mesh.genus() == 0

    def test_polygon_region(self, ident):
        nose = ident.landmark_xy[30]
        box = nose + 0.45 * np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]])
        p = synth.cut_partial(ident, synth.PolygonRegion(box), "nose-box")
        assert p.landmark_mask[30]
        assert not p.landmark_mask[8]  # chin is far outside the box
        assert 0 < p.mesh.n_faces < ident.mesh.n_faces

    def test_polygon_containment(self):
        square = synth.PolygonRegion(np.array([[0, 0], [1, 0], [1, 1], [0, 1]]))
        pts = np.array([[0.5, 0.5], [1.5, 0.5], [-0.2, 0.3], [0.9, 0.99]])
        np.testing.assert_array_equal(
            square.contains(pts), [True, False, False, True]
        )


class TestCutHoles:
    def test_tiny_hole_away_from_landmarks(self, ident):
        p = synth.cut_holes(ident, 1, radius_range=(0.05, 0.08), seed=0)
        assert p.landmark_mask.all()
        assert len(p.mesh.boundary_loops()) == 2

    def test_three_holes_three_extra_loops(self, ident):
        p = synth.cut_holes(ident, 3, radius_range=(0.08, 0.15), seed=11)
        assert len(p.mesh.boundary_loops()) == 4
        assert p.mesh.genus() == 0

    def test_hole_over_nose_tip(self, ident):
        p = synth.cut_holes(
            ident, 1, radius_range=(0.15, 0.15), centers=[ident.landmark_xy[30]]
        )
        assert not p.landmark_mask[30]
        assert p.landmark_mask[8]  # chin untouched

    def test_radius_zero_is_noop(self, ident, caplog):
        with caplog.at_level(logging.WARNING, logger="qcface.synth"):
            p = synth.cut_holes(ident, 1, radius_range=(0.0, 0.0), seed=0)
        assert p.mesh.n_faces == ident.mesh.n_faces
        assert any("radius" in r.message for r in caplog.records)

    def test_merging_placements_exhaust_retries(self, ident):
        with pytest.raises(HolePlacementError):
            synth.cut_holes(ident, 1, radius_range=(0.95, 1.0), seed=0)

    def test_masks_track_hole_containment(self, ident):
        p = synth.cut_holes(ident, 3, radius_range=(0.10, 0.18), seed=5)
        gone = ~p.landmark_mask
        if gone.any():
            assert (p.landmark_vertices[gone] == -1).all()
        kept = p.landmark_mask
        np.testing.assert_array_equal(
            p.mesh.vertices[p.landmark_vertices[kept]],
            ident.mesh.vertices[ident.landmark_vertices[kept]],
        )


class TestWarpGroundTruth:
    def smooth_bump(self, uv, peak):
        cent = uv.points[uv.faces].mean(axis=1)
        mod = peak * np.exp(-(cent[:, 0] ** 2 + (cent[:, 1] + 0.2) ** 2) / 0.3)
        return BeltramiField(mod * np.exp(0.7j))

    def test_zero_mu_is_conformal(self, ident_uv):
        warped, plm = synth.warp_ground_truth(
            ident_uv, BeltramiField.zeros(ident_uv.n_faces), seed=4
        )
        assert warped.flipped_faces() == 0
        mu = beltrami_from_map(plm)
        assert np.abs(mu.values).max() < 1e-8

    def test_smooth_bump_tracks_requested_coefficient(self, ident_uv):
        mu_gt = self.smooth_bump(ident_uv, 0.4)
        warped, plm = synth.warp_ground_truth(ident_uv, mu_gt, seed=9)
        assert warped.flipped_faces() == 0
        mu = beltrami_from_map(plm)
        a, b = mu.values, mu_gt.values
        cos = np.real(np.vdot(a, b)) / (np.linalg.norm(a) * np.linalg.norm(b))
        assert cos > 0.8

    def test_oversized_mu_rejected(self, ident_uv):
        with pytest.raises(InadmissibleFieldError):
            synth.warp_ground_truth(
                ident_uv, BeltramiField(np.full(ident_uv.n_faces, 0.95 + 0j)), seed=0
            )

    def test_map_and_mesh_agree(self, ident_uv):
        warped, plm = synth.warp_ground_truth(ident_uv, self.smooth_bump(ident_uv, 0.3), seed=2)
        np.testing.assert_array_equal(warped.points, plm.image)
        np.testing.assert_array_equal(warped.faces, ident_uv.faces)

    def test_deterministic(self, ident_uv):
        mu = self.smooth_bump(ident_uv, 0.25)
        w1, _ = synth.warp_ground_truth(ident_uv, mu, seed=7)
        w2, _ = synth.warp_ground_truth(ident_uv, mu, seed=7)
        np.testing.assert_array_equal(w1.points, w2.points)


def test_corpus_generation_speed():
    t0 = time.time()
    for seed in range(30):
        i = synth.generate(seed)
        synth.full_face(i)
        synth.cut_partial(i, synth.HalfPlane(1, 0, 0.25 * synth.SEMI_AXES[0]))
        synth.cut_partial(i, synth.HalfPlane(1, 1, 0.2))
        synth.cut_holes(i, 3, seed=seed)
    elapsed = time.time() - t0
    assert elapsed < 15.0
