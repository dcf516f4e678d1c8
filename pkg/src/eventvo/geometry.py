"""Projective and rigid-body primitives.

Conventions used throughout the package:

* A twist is a 6-vector ``(rho, phi)`` with the translational part first and
  the rotational part last.
* ``PoseSE3`` maps points from a source frame into a target frame,
  ``p_target = R @ p_source + t``.  The pipeline stores world-to-camera poses.
* Bearings are homogeneous image directions with the third coordinate 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    BehindCameraError,
    CheiralityError,
    DecompositionError,
    DegenerateGeometryError,
    GeometryError,
    UnderdeterminedError,
    ValidationError,
)

_SMALL_ANGLE = 1e-8


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera parameters in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError("principal point must lie inside the sensor")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def bearing(self, u: float, v: float) -> np.ndarray:
        """Back-project a pixel to a homogeneous bearing (z = 1)."""
        return np.array([(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0])


class PoseSE3:
    """Rigid transform with rotation matrix ``R`` and translation ``t``."""

    __slots__ = ("R", "t")

    def __init__(self, R: np.ndarray, t: np.ndarray, check: bool = True):
        R = np.asarray(R, dtype=float).reshape(3, 3)
        t = np.asarray(t, dtype=float).reshape(3)
        if check:
            if np.linalg.norm(R.T @ R - np.eye(3)) > 1e-9:
                raise ValidationError("rotation matrix is not orthonormal")
            if np.linalg.det(R) <= 0:
                raise ValidationError("rotation matrix must have det +1")
        self.R = R
        self.t = t

    @staticmethod
    def identity() -> "PoseSE3":
        return PoseSE3(np.eye(3), np.zeros(3), check=False)

    def apply(self, p: np.ndarray) -> np.ndarray:
        """Transform points of shape (3,) or (N, 3)."""
        p = np.asarray(p, dtype=float)
        if p.ndim == 1:
            return self.R @ p + self.t
        return p @ self.R.T + self.t

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """Return the transform applying ``other`` first, then ``self``."""
        return PoseSE3(self.R @ other.R, self.R @ other.t + self.t, check=False)

    def inverse(self) -> "PoseSE3":
        return PoseSE3(self.R.T, -self.R.T @ self.t, check=False)

    def almost_equal(self, other: "PoseSE3", tol: float = 1e-9) -> bool:
        return (
            rotation_angle(self.R @ other.R.T) < tol
            and np.linalg.norm(self.t - other.t) < tol
        )

    def __repr__(self):
        return f"PoseSE3(R={self.R.tolist()}, t={self.t.tolist()})"


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix such that ``hat(v) @ w == cross(v, w)``."""
    v = np.asarray(v, dtype=float).reshape(3)
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
    )


def _vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rodrigues formula for a rotation vector."""
    phi = np.asarray(phi, dtype=float).reshape(3)
    theta = np.linalg.norm(phi)
    k = hat(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + k + 0.5 * (k @ k)
    s = np.sin(theta) / theta
    c = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + s * k + c * (k @ k)


def rotation_angle(R: np.ndarray) -> float:
    """Angle of a rotation matrix in radians.

    Uses atan2 of the skew part against the trace, which stays accurate for
    angles near zero where arccos of the trace loses ~1e-8 of precision.
    """
    c = (np.trace(R) - 1.0) / 2.0
    s = np.linalg.norm(_vee(0.5 * (R - R.T)))
    return float(np.arctan2(s, c))


def angle_between(u: np.ndarray, v: np.ndarray) -> float:
    """Angle between two vectors, accurate down to ~1e-16 rad."""
    u = np.asarray(u, dtype=float).reshape(3)
    v = np.asarray(v, dtype=float).reshape(3)
    return float(np.arctan2(np.linalg.norm(np.cross(u, v)), np.dot(u, v)))


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector of ``R``; requires angle < pi - 1e-6."""
    theta = rotation_angle(R)
    if theta > np.pi - 1e-6:
        raise GeometryError("rotation angle too close to pi for the log map")
    skew = 0.5 * (R - R.T)
    if theta < _SMALL_ANGLE:
        return _vee(skew)
    return _vee(skew) * theta / np.sin(theta)


def se3_exp(xi: np.ndarray) -> PoseSE3:
    """Exponential map from a twist ``(rho, phi)`` to a pose."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    rho, phi = xi[:3], xi[3:]
    theta = np.linalg.norm(phi)
    k = hat(phi)
    if theta < _SMALL_ANGLE:
        V = np.eye(3) + 0.5 * k + (k @ k) / 6.0
    else:
        V = (
            np.eye(3)
            + ((1.0 - np.cos(theta)) / theta**2) * k
            + ((theta - np.sin(theta)) / theta**3) * (k @ k)
        )
    return PoseSE3(so3_exp(phi), V @ rho, check=False)


def se3_log(pose: PoseSE3) -> np.ndarray:
    """Logarithm map; inverse of :func:`se3_exp` on the chart interior."""
    phi = so3_log(pose.R)
    theta = np.linalg.norm(phi)
    k = hat(phi)
    if theta < _SMALL_ANGLE:
        V_inv = np.eye(3) - 0.5 * k + (k @ k) / 12.0
    else:
        coef = (1.0 / theta**2) - (1.0 + np.cos(theta)) / (
            2.0 * theta * np.sin(theta)
        )
        V_inv = np.eye(3) - 0.5 * k + coef * (k @ k)
    return np.concatenate([V_inv @ pose.t, phi])


def project(point: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Project a camera-frame point to pixel coordinates."""
    point = np.asarray(point, dtype=float).reshape(3)
    if point[2] <= 0:
        raise BehindCameraError(f"point depth {point[2]:.6g} is not positive")
    return np.array(
        [
            K.fx * point[0] / point[2] + K.cx,
            K.fy * point[1] / point[2] + K.cy,
        ]
    )


def triangulate(
    x1: np.ndarray, x2: np.ndarray, R: np.ndarray, t: np.ndarray
) -> tuple[float, float, float]:
    """Linear two-view triangulation.

    ``x1`` and ``x2`` are homogeneous bearings (third coordinate 1) of the
    same point seen from frame 1 and frame 2, and ``(R, t)`` maps frame-1
    coordinates into frame 2.  Solves ``Z2 * x2 = Z1 * R @ x1 + t`` for the
    two depths in least squares.

    Returns:
        ``(Z1, Z2, residual)`` where residual is the norm of the constraint
        violation at the solution.

    Raises:
        DegenerateGeometryError: parallax angle below 1e-4 rad.
        CheiralityError: a recovered depth is not positive.
    """
    x1 = np.asarray(x1, dtype=float).reshape(3)
    x2 = np.asarray(x2, dtype=float).reshape(3)
    rx1 = np.asarray(R) @ x1
    cosang = np.dot(rx1, x2) / (np.linalg.norm(rx1) * np.linalg.norm(x2))
    if np.arccos(np.clip(abs(cosang), -1.0, 1.0)) < 1e-4:
        raise DegenerateGeometryError("parallax angle below 1e-4 rad")
    A = np.column_stack([rx1, -x2])
    sol, _, _, _ = np.linalg.lstsq(A, -np.asarray(t, dtype=float), rcond=None)
    z1, z2 = float(sol[0]), float(sol[1])
    residual = float(np.linalg.norm(z2 * x2 - z1 * rx1 - t))
    if z1 <= 0 or z2 <= 0:
        raise CheiralityError(f"triangulated depths ({z1:.4g}, {z2:.4g}) not positive")
    return z1, z2, residual


def _isotropic_normalization(points: np.ndarray) -> np.ndarray:
    """3x3 transform moving the centroid to 0 and mean radius to sqrt(2)."""
    xy = points[:, :2]
    centroid = xy.mean(axis=0)
    mean_dist = np.mean(np.linalg.norm(xy - centroid, axis=1))
    scale = np.sqrt(2.0) / mean_dist if mean_dist > 1e-12 else 1.0
    T = np.array(
        [
            [scale, 0.0, -scale * centroid[0]],
            [0.0, scale, -scale * centroid[1]],
            [0.0, 0.0, 1.0],
        ]
    )
    return T


def _project_to_essential(E: np.ndarray) -> np.ndarray:
    U, s, Vt = np.linalg.svd(E)
    sigma = (s[0] + s[1]) / 2.0
    return U @ np.diag([sigma, sigma, 0.0]) @ Vt


def _canonical_sign(E: np.ndarray) -> np.ndarray:
    E = E / np.linalg.norm(E)
    flat = E.ravel()
    if flat[np.argmax(np.abs(flat))] < 0:
        E = -E
    return E


def eight_point(
    x1: np.ndarray, x2: np.ndarray, rank_tol: float = 1e-9
) -> np.ndarray:
    """Estimate the essential matrix from >= 8 bearing correspondences.

    Rows of ``x1`` / ``x2`` are homogeneous bearings in the two frames.  The
    returned matrix satisfies ``x2.T @ E @ x1 = 0``, has singular values
    ``(s, s, 0)``, Frobenius norm 1, and its largest-magnitude entry positive.

    Raises:
        UnderdeterminedError: fewer than 8 correspondences.
        DegenerateGeometryError: constraint matrix has rank < 8.
    """
    x1 = np.atleast_2d(np.asarray(x1, dtype=float))
    x2 = np.atleast_2d(np.asarray(x2, dtype=float))
    n = x1.shape[0]
    if n < 8:
        raise UnderdeterminedError(f"need at least 8 correspondences, got {n}")

    T1 = _isotropic_normalization(x1)
    T2 = _isotropic_normalization(x2)
    n1 = x1 @ T1.T
    n2 = x2 @ T2.T

    # Row i is the coefficient of vec(E) in x2_i^T E x1_i = 0.
    A = np.einsum("ni,nj->nij", n2, n1).reshape(n, 9)
    _, s, Vt = np.linalg.svd(A)
    if s[7] < rank_tol * s[0]:
        raise DegenerateGeometryError("correspondences are degenerate (rank < 8)")
    En = Vt[-1].reshape(3, 3)
    E = T2.T @ En @ T1
    return _canonical_sign(_project_to_essential(E))


def decompose_essential(
    E: np.ndarray, x1: np.ndarray, x2: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Recover ``(R, t)`` with unit translation from an essential matrix.

    Of the four algebraic candidates, returns the one placing the majority of
    the triangulated correspondences at positive depth in both frames.
    """
    x1 = np.atleast_2d(np.asarray(x1, dtype=float))
    x2 = np.atleast_2d(np.asarray(x2, dtype=float))
    if x1.shape[0] < 1:
        raise UnderdeterminedError("need at least 1 correspondence for cheirality")

    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = U[:, 2] / np.linalg.norm(U[:, 2])
    candidates = [
        (U @ W @ Vt, t),
        (U @ W @ Vt, -t),
        (U @ W.T @ Vt, t),
        (U @ W.T @ Vt, -t),
    ]

    best, best_count = None, -1
    for R, tc in candidates:
        count = 0
        for a, b in zip(x1, x2):
            try:
                triangulate(a, b, R, tc)
            except GeometryError:
                continue
            count += 1
        if count > best_count:
            best, best_count = (R, tc), count
    if best is None or best_count == 0:
        raise DecompositionError("no candidate passed the cheirality test")
    return best
