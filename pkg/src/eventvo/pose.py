"""Camera pose estimation by damped Gauss-Newton on weighted reprojection error.

The pose increment is left-multiplicative: a step ``delta`` maps the current
pose ``T`` to ``exp(delta) @ T``.  Robustness comes from Huber reweighting of
each residual (recomputed every iteration) and Levenberg damping that only
accepts steps which do not increase the total weighted squared error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BehindCameraError,
    DegenerateGeometryError,
    UnderdeterminedError,
)
from .geometry import CameraIntrinsics, PoseSE3, hat, project, se3_exp, se3_log


@dataclass(frozen=True)
class Observation:
    """A tracked pixel paired with its 3D map point in world coordinates."""

    uv: np.ndarray
    point: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "uv", np.asarray(self.uv, dtype=float).reshape(2))
        object.__setattr__(self, "point", np.asarray(self.point, dtype=float).reshape(3))
        if self.weight < 0:
            raise ValueError("observation weight must be non-negative")


@dataclass
class OptimizerReport:
    iterations: int = 0
    initial_error: float = 0.0
    final_error: float = 0.0
    final_step_norm: float = float("inf")
    converged: bool = False
    n_valid: int = 0
    n_excluded: int = 0
    error_history: list = field(default_factory=list)


def residual_at_pose(pose: PoseSE3, obs: Observation, K: CameraIntrinsics) -> np.ndarray:
    """Pixel residual ``observed - projected`` for a world-to-camera pose."""
    return obs.uv - project(pose.apply(obs.point), K)


def reprojection_error(xi: np.ndarray, obs: Observation, K: CameraIntrinsics) -> np.ndarray:
    """Residual at the pose ``exp(xi)``; raises if the point falls behind."""
    return residual_at_pose(se3_exp(xi), obs, K)


def jacobian_at_pose(pose: PoseSE3, obs: Observation, K: CameraIntrinsics) -> np.ndarray:
    """2x6 derivative of the residual w.r.t. a left-multiplied increment."""
    q = pose.apply(obs.point)
    if q[2] <= 0:
        raise BehindCameraError("point behind camera while evaluating the Jacobian")
    z = q[2]
    d_proj = np.array(
        [
            [K.fx / z, 0.0, -K.fx * q[0] / (z * z)],
            [0.0, K.fy / z, -K.fy * q[1] / (z * z)],
        ]
    )
    d_point = np.hstack([np.eye(3), -hat(q)])  # translation first, rotation last
    return -d_proj @ d_point


def reprojection_jacobian(xi: np.ndarray, obs: Observation, K: CameraIntrinsics) -> np.ndarray:
    return jacobian_at_pose(se3_exp(xi), obs, K)


def huber_weight(e: np.ndarray, delta: float) -> float:
    """Huber influence weight: 1 on the inlier plateau, delta/|e| beyond."""
    if delta <= 0:
        raise ValueError("huber delta must be positive")
    norm = float(np.linalg.norm(e))
    return 1.0 if norm <= delta else delta / norm


def _weighted_cost(pose, observations, K, delta):
    """Total weighted squared error, or None if any point falls behind."""
    cost = 0.0
    for obs in observations:
        q = pose.apply(obs.point)
        if q[2] <= 0:
            return None
        e = obs.uv - project(q, K)
        cost += obs.weight * huber_weight(e, delta) * float(e @ e)
    return cost


def optimize_pose(
    xi_init: np.ndarray,
    observations: list[Observation],
    K: CameraIntrinsics,
    max_iters: int = 20,
    tol: float = 1e-8,
    huber_delta: float = 1.5,
) -> tuple[np.ndarray, OptimizerReport]:
    """Minimize the weighted reprojection error over the camera pose.

    Observations whose point lies behind the camera at the initial pose are
    excluded (and counted in the report).  Each iteration rebuilds the normal
    equations with fresh Huber weights, solves for the increment with an
    adaptive Levenberg damping factor, and accepts the step only if the cost
    does not increase.

    Returns:
        ``(xi_opt, report)`` where ``xi_opt`` is the twist of the optimized
        world-to-camera pose.

    Raises:
        UnderdeterminedError: fewer than 3 valid observations.
        DegenerateGeometryError: normal matrix condition number above 1e12.
    """
    pose = se3_exp(np.asarray(xi_init, dtype=float).reshape(6))
    report = OptimizerReport()

    valid: list[Observation] = []
    for obs in observations:
        if pose.apply(obs.point)[2] > 0:
            valid.append(obs)
        else:
            report.n_excluded += 1
    report.n_valid = len(valid)
    if len(valid) < 3:
        raise UnderdeterminedError(
            f"pose optimization needs >= 3 valid observations, got {len(valid)}"
        )

    cost = _weighted_cost(pose, valid, K, huber_delta)
    report.initial_error = cost
    report.error_history.append(cost)
    lam = 1e-4

    for it in range(1, max_iters + 1):
        report.iterations = it
        H = np.zeros((6, 6))
        g = np.zeros(6)
        for obs in valid:
            e = residual_at_pose(pose, obs, K)
            J = jacobian_at_pose(pose, obs, K)
            w = obs.weight * huber_weight(e, huber_delta)
            H += w * (J.T @ J)
            g += w * (J.T @ e)
        if np.linalg.cond(H) > 1e12:
            raise DegenerateGeometryError(
                "normal matrix condition number above 1e12 (degenerate geometry)"
            )

        accepted = False
        for _ in range(12):
            step = np.linalg.solve(H + lam * np.eye(6), -g)
            candidate = se3_exp(step).compose(pose)
            new_cost = _weighted_cost(candidate, valid, K, huber_delta)
            if new_cost is not None and new_cost <= cost:
                pose = candidate
                cost = new_cost
                lam = max(lam / 10.0, 1e-12)
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            # No damping level improves the cost; treat as converged in place.
            report.final_step_norm = 0.0
            report.converged = True
            break

        report.error_history.append(cost)
        report.final_step_norm = float(np.linalg.norm(step))
        if report.final_step_norm < tol:
            report.converged = True
            break

    report.final_error = cost
    return se3_log(pose), report
