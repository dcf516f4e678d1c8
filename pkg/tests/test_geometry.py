"""Geometry primitives against hand values, round trips and generator oracles."""

import numpy as np
import pytest

from eventvo.errors import (
    BehindCameraError,
    CheiralityError,
    DegenerateGeometryError,
    GeometryError,
    UnderdeterminedError,
)
from eventvo.geometry import (
    CameraIntrinsics,
    angle_between,
    PoseSE3,
    decompose_essential,
    eight_point,
    hat,
    project,
    rotation_angle,
    se3_exp,
    se3_log,
    triangulate,
)

from oracles import random_pose

K = CameraIntrinsics(fx=100.0, fy=100.0, cx=64.0, cy=64.0, width=128, height=128)


class TestHat:
    def test_definition(self):
        expected = np.array([[0, 0, 0], [0, 0, -1], [0, 1, 0]], dtype=float)
        assert np.allclose(hat([1, 0, 0]), expected)

    def test_cross_product_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            v, w = rng.normal(size=3), rng.normal(size=3)
            assert np.allclose(hat(v) @ w, np.cross(v, w))
            assert np.allclose(hat(v) @ v, 0.0)

    def test_antisymmetry(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            v = rng.normal(size=3)
            assert np.allclose(hat(v).T, -hat(v))


class TestSE3:
    def test_zero_twist_is_identity(self):
        pose = se3_exp(np.zeros(6))
        assert np.allclose(pose.R, np.eye(3))
        assert np.allclose(pose.t, 0.0)

    def test_quarter_turn_about_z(self):
        pose = se3_exp([0, 0, 0, 0, 0, np.pi / 2])
        assert np.allclose(pose.R @ np.array([1.0, 0, 0]), [0.0, 1.0, 0.0], atol=1e-12)

    def test_exp_log_round_trip(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            angle = rng.uniform(0, 3.0)
            xi = np.concatenate([rng.uniform(-2, 2, 3), angle * axis])
            assert np.allclose(se3_log(se3_exp(xi)), xi, atol=1e-9)

    def test_log_near_pi_raises(self):
        pose = se3_exp([0, 0, 0, np.pi - 1e-9, 0, 0])
        with pytest.raises(GeometryError):
            se3_log(pose)

    def test_compose_inverse(self):
        rng = np.random.default_rng(3)
        a, b = random_pose(rng), random_pose(rng)
        ab = a.compose(b)
        p = rng.normal(size=3)
        assert np.allclose(ab.apply(p), a.apply(b.apply(p)))
        assert a.compose(a.inverse()).almost_equal(PoseSE3.identity())


class TestProject:
    def test_optical_axis(self):
        assert np.allclose(project([0, 0, 2], K), [64.0, 64.0])

    def test_hand_value(self):
        assert np.allclose(project([0.2, -0.4, 2.0], K), [74.0, 44.0])

    def test_behind_camera(self):
        with pytest.raises(BehindCameraError):
            project([0, 0, -1.0], K)


class TestTriangulate:
    def test_exact_noiseless_geometry(self):
        z1, z2, residual = triangulate(
            [0, 0, 1], [0.2, 0, 1], np.eye(3), np.array([1.0, 0, 0])
        )
        assert z1 == pytest.approx(5.0, abs=1e-12)
        assert z2 == pytest.approx(5.0, abs=1e-12)
        assert residual < 1e-12

    def test_zero_baseline_degenerate(self):
        pose = random_pose(np.random.default_rng(4))
        x1 = np.array([0.1, -0.2, 1.0])
        x2 = pose.R @ x1
        x2 = x2 / x2[2]
        with pytest.raises(DegenerateGeometryError):
            triangulate(x1, x2, pose.R, np.zeros(3))

    def test_negative_depth_cheirality(self):
        # Rays that only intersect behind the cameras.
        with pytest.raises(CheiralityError):
            triangulate([0, 0, 1], [0.2, 0, 1], np.eye(3), np.array([-1.0, 0, 0]))

    def test_random_scenes_recover_generating_depth(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            pose = random_pose(rng)
            p1 = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(2, 8)])
            p2 = pose.apply(p1)
            if p2[2] <= 0.1:
                continue
            z1, z2, residual = triangulate(p1 / p1[2], p2 / p2[2], pose.R, pose.t)
            assert abs(z1 - p1[2]) / p1[2] < 1e-9
            assert abs(z2 - p2[2]) / p2[2] < 1e-9
            assert residual < 1e-9


def _scene(rng, n, max_angle=0.4):
    """Random relative pose with bearings of points in front of both views."""
    pose = random_pose(rng, max_angle=max_angle)
    x1, x2 = [], []
    while len(x1) < n:
        p1 = np.array([rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(3, 12)])
        p2 = pose.apply(p1)
        if p2[2] < 0.5:
            continue
        x1.append(p1 / p1[2])
        x2.append(p2 / p2[2])
    return pose, np.array(x1), np.array(x2)


class TestEightPoint:
    def test_pure_translation_matches_skew(self):
        rng = np.random.default_rng(6)
        t = np.array([1.0, 0.0, 0.0])
        x1, x2 = [], []
        for _ in range(20):
            p1 = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(3, 9)])
            p2 = p1 + t
            x1.append(p1 / p1[2])
            x2.append(p2 / p2[2])
        E = eight_point(np.array(x1), np.array(x2))
        expected = hat(t)
        expected /= np.linalg.norm(expected)
        sign = np.sign(np.sum(E * expected))
        assert np.max(np.abs(E - sign * expected)) < 1e-9

    def test_epipolar_residual_on_inputs(self):
        rng = np.random.default_rng(7)
        _, x1, x2 = _scene(rng, 30)
        E = eight_point(x1, x2)
        residuals = np.einsum("ni,ij,nj->n", x2, E, x1)
        assert np.max(np.abs(residuals)) < 1e-10

    def test_arity_error(self):
        rng = np.random.default_rng(8)
        _, x1, x2 = _scene(rng, 7)
        with pytest.raises(UnderdeterminedError):
            eight_point(x1, x2)

    def test_single_line_of_sight_degenerate(self):
        x1 = np.tile(np.array([0.1, 0.2, 1.0]), (8, 1))
        x2 = np.tile(np.array([0.3, -0.1, 1.0]), (8, 1))
        with pytest.raises(DegenerateGeometryError):
            eight_point(x1, x2)

    def test_properties_normalization_and_sign(self):
        rng = np.random.default_rng(9)
        _, x1, x2 = _scene(rng, 25)
        E = eight_point(x1, x2)
        s = np.linalg.svd(E, compute_uv=False)
        assert abs(np.linalg.norm(E) - 1.0) < 1e-12
        assert abs(s[0] - s[1]) < 1e-9 and s[2] < 1e-9
        assert E.ravel()[np.argmax(np.abs(E))] > 0

    def test_epipolar_identity_of_generated_scenes(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            pose, x1, x2 = _scene(rng, 12)
            E = hat(pose.t) @ pose.R
            residuals = np.einsum("ni,ij,nj->n", x2, E, x1)
            assert np.max(np.abs(residuals)) < 1e-12

    def test_translation_scale_invariance(self):
        rng = np.random.default_rng(11)
        pose, x1, _ = _scene(rng, 20)
        depths = rng.uniform(3, 12, len(x1))
        E_ref = hat(pose.t / np.linalg.norm(pose.t)) @ pose.R
        E_ref /= np.linalg.norm(E_ref)
        for lam in (0.5, 2.0, 7.0):
            scaled = PoseSE3(pose.R, lam * pose.t)
            x2 = np.array([scaled.apply(b * z) for b, z in zip(x1, depths)])
            x2 = x2 / x2[:, 2:3]
            E = eight_point(x1, x2)
            sign = np.sign(np.sum(E * E_ref))
            assert np.max(np.abs(E - sign * E_ref)) < 1e-8


class TestDecomposeEssential:
    def test_recovers_pure_translation(self):
        rng = np.random.default_rng(12)
        t_true = np.array([1.0, 0.0, 0.0])
        x1, x2 = [], []
        for _ in range(10):
            p1 = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(3, 9)])
            p2 = p1 + t_true
            x1.append(p1 / p1[2])
            x2.append(p2 / p2[2])
        x1, x2 = np.array(x1), np.array(x2)
        E = eight_point(x1, x2)
        R, t = decompose_essential(E, x1, x2)
        assert rotation_angle(R) < 1e-8
        assert angle_between(t, t_true) < 1e-8

    def test_negated_matrix_same_result(self):
        rng = np.random.default_rng(13)
        _, x1, x2 = _scene(rng, 15)
        E = eight_point(x1, x2)
        R1, t1 = decompose_essential(E, x1, x2)
        R2, t2 = decompose_essential(-E, x1, x2)
        assert np.allclose(R1, R2, atol=1e-12)
        assert np.allclose(t1, t2, atol=1e-12)

    def test_correct_candidate_on_random_scenes(self):
        rng = np.random.default_rng(14)
        for _ in range(100):
            pose, x1, x2 = _scene(rng, 20)
            E = eight_point(x1, x2)
            R, t = decompose_essential(E, x1, x2)
            t_true = pose.t / np.linalg.norm(pose.t)
            assert rotation_angle(R @ pose.R.T) < 1e-8
            assert min(angle_between(t, t_true), angle_between(-t, t_true)) < 1e-8
            assert t @ t_true > 0  # cheirality also fixes the sign
