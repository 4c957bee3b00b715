import numpy as np
import pytest

from aeroloc.errors import ContractViolationError, HomographyEstimationError, ProjectionError
from aeroloc.fine import FineConfig, PointMatchSet
from aeroloc.homography import (
    Homography,
    _symmetric_transfer_error,
    estimate_homography_ransac,
    project_center,
)


def make_matches(pts_a, pts_b):
    pts_a = np.asarray(pts_a, dtype=float)
    pts_b = np.asarray(pts_b, dtype=float)
    return PointMatchSet(pts_a, pts_b, np.zeros(len(pts_a)))


def random_projective(rng, angle_deg=10.0):
    theta = np.radians(rng.uniform(-angle_deg, angle_deg))
    c, s = np.cos(theta), np.sin(theta)
    scale = rng.uniform(0.9, 1.1)
    h = np.array(
        [
            [scale * c, -scale * s, rng.uniform(-30, 30)],
            [scale * s, scale * c, rng.uniform(-30, 30)],
            [rng.uniform(-1e-4, 1e-4), rng.uniform(-1e-4, 1e-4), 1.0],
        ]
    )
    return Homography(h)


class TestHomographyType:
    def test_normalized_bottom_right(self):
        h = Homography(2.0 * np.eye(3))
        assert h.matrix[2, 2] == 1.0

    def test_singular_rejected(self):
        m = np.ones((3, 3))
        with pytest.raises(ContractViolationError):
            Homography(m)

    def test_apply_and_inverse(self, rng):
        h = random_projective(rng)
        pts = rng.uniform(0, 200, size=(10, 2))
        back = h.inverse().apply(h.apply(pts))
        assert np.allclose(back, pts, atol=1e-9)


class TestProjectCenter:
    def test_identity(self):
        h = Homography(np.eye(3))
        assert project_center(h, (128.0, 128.0)) == (128.0, 128.0)

    def test_translation(self):
        m = np.eye(3)
        m[0, 2], m[1, 2] = 10.0, 5.0
        out = project_center(Homography(m), (128.0, 128.0))
        assert out == (138.0, 133.0)

    def test_matches_direct_evaluation(self, rng):
        h = random_projective(rng)
        p = (73.5, 41.25)
        v = h.matrix @ np.array([p[0], p[1], 1.0])
        expected = (v[0] / v[2], v[1] / v[2])
        got = project_center(h, p)
        assert got[0] == pytest.approx(expected[0], abs=1e-9)
        assert got[1] == pytest.approx(expected[1], abs=1e-9)

    def test_point_at_infinity_rejected(self):
        m = np.eye(3)
        m[2] = [0.01, 0.0, -1.0]
        h = Homography(m)
        with pytest.raises(ProjectionError):
            project_center(h, (100.0, 0.0))


class TestRansac:
    def test_exact_identity_from_four_points(self):
        pts = [[0, 0], [100, 0], [0, 100], [100, 100]]
        h, inliers = estimate_homography_ransac(make_matches(pts, pts), seed=0)
        assert np.allclose(h.matrix, np.eye(3), atol=1e-9)
        assert inliers.all()

    def test_fewer_than_four_rejected(self):
        pts = [[0, 0], [1, 0], [0, 1]]
        with pytest.raises(HomographyEstimationError):
            estimate_homography_ransac(make_matches(pts, pts), seed=0)

    def test_collinear_points_rejected(self):
        pts = [[0, 0], [10, 10], [20, 20], [30, 30], [40, 40]]
        with pytest.raises(HomographyEstimationError):
            estimate_homography_ransac(make_matches(pts, pts), seed=0)

    def test_recovers_known_transform_among_outliers(self):
        rng = np.random.default_rng(42)
        h_true = random_projective(rng)
        inlier_pts = rng.uniform(20, 480, size=(40, 2))
        proj = h_true.apply(inlier_pts)
        out_a = rng.uniform(0, 500, size=(40, 2))
        out_b = rng.uniform(0, 500, size=(40, 2))
        pts_a = np.vstack([inlier_pts, out_a])
        pts_b = np.vstack([proj, out_b])
        h, inliers = estimate_homography_ransac(
            make_matches(pts_a, pts_b), FineConfig(), seed=1
        )
        center = np.array([[250.0, 250.0]])
        err = np.linalg.norm(h.apply(center) - h_true.apply(center))
        assert err < 1.0
        assert inliers[:40].sum() >= 38

    def test_deterministic_for_fixed_seed(self, rng):
        h_true = random_projective(rng)
        pts_a = rng.uniform(0, 400, size=(30, 2))
        pts_b = h_true.apply(pts_a) + rng.normal(0, 0.5, size=(30, 2))
        m = make_matches(pts_a, pts_b)
        h1, in1 = estimate_homography_ransac(m, seed=7)
        h2, in2 = estimate_homography_ransac(m, seed=7)
        assert np.array_equal(h1.matrix, h2.matrix)
        assert np.array_equal(in1, in2)

    def test_refit_never_increases_inlier_error(self):
        rng = np.random.default_rng(3)
        for trial in range(10):
            h_true = random_projective(rng)
            pts_a = rng.uniform(0, 400, size=(50, 2))
            noise = rng.normal(0, 1.0, size=(50, 2))
            pts_b = h_true.apply(pts_a) + noise
            h, inliers = estimate_homography_ransac(
                make_matches(pts_a, pts_b), FineConfig(), seed=trial
            )
            if inliers.sum() >= 4:
                err = _symmetric_transfer_error(h.matrix, pts_a, pts_b)
                assert err[inliers].mean() <= 2.0 * FineConfig().ransac_threshold

    def test_noisy_inliers_high_success_rate(self):
        # smoke-scale version of the acceptance oracle (full 100 trials there)
        rng = np.random.default_rng(9)
        ok = 0
        for trial in range(10):
            h_true = random_projective(rng)
            inlier_pts = rng.uniform(20, 480, size=(40, 2))
            pts_a = np.vstack([inlier_pts, rng.uniform(0, 500, size=(40, 2))])
            pts_b = np.vstack([h_true.apply(inlier_pts), rng.uniform(0, 500, size=(40, 2))])
            h, _ = estimate_homography_ransac(make_matches(pts_a, pts_b), seed=trial)
            c = np.array([[250.0, 250.0]])
            if np.linalg.norm(h.apply(c) - h_true.apply(c)) < 1.0:
                ok += 1
        assert ok >= 9
