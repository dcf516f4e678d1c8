"""Pose optimizer: residuals, Jacobians vs finite differences, convergence."""

import numpy as np
import pytest

from eventvo.errors import BehindCameraError, UnderdeterminedError
from eventvo.geometry import (
    CameraIntrinsics,
    PoseSE3,
    rotation_angle,
    se3_exp,
    se3_log,
)
from eventvo.pose import (
    Observation,
    huber_weight,
    jacobian_at_pose,
    optimize_pose,
    reprojection_error,
    reprojection_jacobian,
    residual_at_pose,
)

from oracles import finite_difference_jacobian, random_pose

K = CameraIntrinsics(fx=100.0, fy=100.0, cx=64.0, cy=64.0, width=128, height=128)


def _synthetic_problem(rng, n, pose=None, noise=0.0):
    """Observations of random points under a ground-truth pose."""
    pose = random_pose(rng, max_angle=0.4) if pose is None else pose
    observations = []
    while len(observations) < n:
        p_cam = np.array([rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(2, 10)])
        p_world = pose.inverse().apply(p_cam)
        uv = np.array([K.fx * p_cam[0] / p_cam[2] + K.cx, K.fy * p_cam[1] / p_cam[2] + K.cy])
        if noise > 0:
            uv = uv + rng.normal(0, noise, 2)
        observations.append(Observation(uv=uv, point=p_world))
    return pose, observations


class TestReprojectionError:
    def test_identity_on_axis(self):
        obs = Observation(uv=[64.0, 64.0], point=[0.0, 0.0, 2.0])
        assert np.allclose(reprojection_error(np.zeros(6), obs, K), [0.0, 0.0])

    def test_hand_value(self):
        obs = Observation(uv=[75.0, 44.0], point=[0.2, -0.4, 2.0])
        assert np.allclose(reprojection_error(np.zeros(6), obs, K), [1.0, 0.0])

    def test_behind_camera_flagged(self):
        obs = Observation(uv=[64.0, 64.0], point=[0.0, 0.0, -1.0])
        with pytest.raises(BehindCameraError):
            reprojection_error(np.zeros(6), obs, K)


class TestReprojectionJacobian:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(31)
        checked = 0
        while checked < 200:
            pose = random_pose(rng, max_angle=0.6)
            p_cam = np.array([rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(1, 10)])
            obs = Observation(uv=rng.uniform(0, 128, 2), point=pose.inverse().apply(p_cam))
            J = jacobian_at_pose(pose, obs, K)
            J_fd = finite_difference_jacobian(lambda q: residual_at_pose(q, obs, K), pose)
            assert np.linalg.norm(J - J_fd) / np.linalg.norm(J_fd) < 1e-5
            checked += 1

    def test_on_axis_translation_column(self):
        z = 4.0
        obs = Observation(uv=[64.0, 64.0], point=[0.0, 0.0, z])
        J = reprojection_jacobian(np.zeros(6), obs, K)
        assert J[0, 0] == pytest.approx(-K.fx / z)

    def test_z_rotation_column_zero_on_axis(self):
        obs = Observation(uv=[64.0, 64.0], point=[0.0, 0.0, 5.0])
        J = reprojection_jacobian(np.zeros(6), obs, K)
        assert np.allclose(J[:, 5], 0.0, atol=1e-12)


class TestHuberWeight:
    def test_inlier_plateau(self):
        assert huber_weight(np.zeros(2), 1.5) == 1.0

    def test_definition_at_two_delta(self):
        assert huber_weight(np.array([3.0, 0.0]), 1.5) == pytest.approx(0.5)

    def test_monotone_non_increasing(self):
        delta = 1.5
        norms = np.linspace(0.0, 10 * delta, 200)
        weights = [huber_weight(np.array([n, 0.0]), delta) for n in norms]
        assert all(w1 >= w2 for w1, w2 in zip(weights, weights[1:]))


class TestOptimizePose:
    def test_converges_immediately_at_optimum(self):
        rng = np.random.default_rng(33)
        pose, obs = _synthetic_problem(rng, 30)
        xi, report = optimize_pose(se3_log(pose), obs, K)
        assert report.iterations == 1
        assert report.converged
        assert report.final_error < 1e-12

    def test_recovers_perturbed_pose(self):
        rng = np.random.default_rng(34)
        for _ in range(10):
            pose, obs = _synthetic_problem(rng, 50)
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            shift = rng.normal(size=3)
            shift = 0.1 * shift / np.linalg.norm(shift)
            delta = np.concatenate([shift, 0.1 * axis])
            xi0 = se3_log(se3_exp(delta).compose(pose))
            xi, report = optimize_pose(xi0, obs, K)
            recovered = se3_exp(xi)
            assert report.iterations <= 10
            assert rotation_angle(recovered.R @ pose.R.T) < 1e-6
            assert np.linalg.norm(recovered.t - pose.t) < 1e-6

    def test_outliers_with_huber(self):
        # The no-outlier baseline uses the same noisy inliers so the ratio in
        # the criterion is meaningful.
        rng = np.random.default_rng(35)
        pose, obs = _synthetic_problem(rng, 50, noise=0.5)
        delta = np.concatenate([[0.05, 0, 0], [0.05, 0, 0]])
        xi0 = se3_log(se3_exp(delta).compose(pose))

        xi_clean, _ = optimize_pose(xi0, obs, K, huber_delta=1.5)
        clean_pose = se3_exp(xi_clean)
        err_clean = max(
            rotation_angle(clean_pose.R @ pose.R.T),
            np.linalg.norm(clean_pose.t - pose.t),
        )

        outlier_idx = rng.choice(50, size=5, replace=False)
        dirty = list(obs)
        for i in outlier_idx:
            dirty[i] = Observation(uv=dirty[i].uv + np.array([50.0, 0.0]), point=dirty[i].point)
        xi_dirty, _ = optimize_pose(xi0, dirty, K, huber_delta=1.5)
        dirty_pose = se3_exp(xi_dirty)
        err_dirty = max(
            rotation_angle(dirty_pose.R @ pose.R.T),
            np.linalg.norm(dirty_pose.t - pose.t),
        )
        assert err_dirty <= 5.0 * err_clean

    def test_error_sequence_non_increasing(self):
        rng = np.random.default_rng(36)
        for _ in range(20):
            pose, obs = _synthetic_problem(rng, 40, noise=1.0)
            delta = rng.normal(0, 0.05, 6)
            xi0 = se3_log(se3_exp(delta).compose(pose))
            _, report = optimize_pose(xi0, obs, K)
            hist = report.error_history
            assert all(e1 >= e2 for e1, e2 in zip(hist, hist[1:]))
            assert report.final_error <= report.initial_error

    def test_gauge_consistency(self):
        rng = np.random.default_rng(37)
        pose, obs = _synthetic_problem(rng, 40)
        finals = []
        for seed in (0, 1):
            d_rng = np.random.default_rng(seed)
            delta = d_rng.normal(0, 0.03, 6)
            xi0 = se3_log(se3_exp(delta).compose(pose))
            xi, _ = optimize_pose(xi0, obs, K)
            finals.append(se3_exp(xi))
        assert rotation_angle(finals[0].R @ finals[1].R.T) < 1e-6
        assert np.linalg.norm(finals[0].t - finals[1].t) < 1e-6

    def test_zero_gradient_at_optimum(self):
        rng = np.random.default_rng(38)
        pose, obs = _synthetic_problem(rng, 40)
        xi, _ = optimize_pose(se3_log(pose), obs, K)
        opt = se3_exp(xi)
        g = np.zeros(6)
        for o in obs:
            e = residual_at_pose(opt, o, K)
            J = jacobian_at_pose(opt, o, K)
            g += J.T @ e
        assert np.linalg.norm(g) < 1e-9

    def test_underdetermined(self):
        rng = np.random.default_rng(39)
        _, obs = _synthetic_problem(rng, 2)
        with pytest.raises(UnderdeterminedError):
            optimize_pose(np.zeros(6), obs, K)

    def test_behind_camera_points_excluded_with_report(self):
        rng = np.random.default_rng(40)
        pose, obs = _synthetic_problem(rng, 10)
        behind = Observation(uv=[64.0, 64.0], point=pose.inverse().apply([0.0, 0.0, -3.0]))
        xi, report = optimize_pose(se3_log(pose), obs + [behind], K)
        assert report.n_excluded == 1
        assert report.n_valid == 10
