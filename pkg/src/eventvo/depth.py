"""Per-feature recursive Bayesian depth estimation.

Each tracked feature carries a belief over its depth along the birth-keyframe
bearing.  Measurements are triangulated depths modelled as a mixture of a
Gaussian around the true depth (inliers) and a uniform density over the known
depth range (outliers).  The belief is a Gaussian over depth times a Beta
over the inlier probability; after each measurement the exact posterior is
projected back onto that family by moment matching.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import DegenerateGeometryError, ValidationError
from .geometry import CameraIntrinsics, PoseSE3


@dataclass(frozen=True)
class DepthFilterState:
    """Gaussian-times-Beta depth belief for one feature."""

    d_mean: float
    d_var: float
    a: float
    b: float
    d_min: float
    d_max: float
    keyframe_id: int
    n_updates: int = 0
    clamp_events: int = 0

    def __post_init__(self):
        if not (self.d_min <= self.d_mean <= self.d_max):
            raise ValidationError("depth mean outside the configured range")
        if self.d_var <= 0 or self.a <= 0 or self.b <= 0:
            raise ValidationError("depth variance and Beta counts must be positive")

    @property
    def inlier_probability(self) -> float:
        return self.a / (self.a + self.b)


@dataclass(frozen=True)
class DepthMeasurement:
    """One triangulated depth with its one-pixel-disparity variance."""

    d_tilde: float
    tau2: float

    def __post_init__(self):
        if not math.isfinite(self.d_tilde):
            raise ValidationError("measured depth must be finite")
        if self.tau2 <= 0:
            raise ValidationError("measurement variance must be positive")


def init_filter(d_min: float, d_max: float, keyframe_id: int) -> DepthFilterState:
    """Fresh belief: moments of a uniform prior over the depth range."""
    if d_min >= d_max:
        raise ValidationError(f"invalid depth range [{d_min}, {d_max}]")
    half = (d_max - d_min) / 2.0
    return DepthFilterState(
        d_mean=(d_min + d_max) / 2.0,
        d_var=half * half / 3.0,
        a=10.0,
        b=10.0,
        d_min=d_min,
        d_max=d_max,
        keyframe_id=keyframe_id,
    )


def update(state: DepthFilterState, m: DepthMeasurement) -> DepthFilterState:
    """Fuse one measurement into the belief.

    The exact posterior under the Gaussian+Uniform measurement mixture is a
    two-component mixture of Gaussian-times-Beta densities; its first two
    moments in depth and in inlier probability define the returned state.
    The uniform outlier density is evaluated as 1/(d_max - d_min) for any
    measured value so the update stays total.  If the posterior mean leaves
    the depth range it is clamped and the event is counted.
    """
    mu, sigma2 = state.d_mean, state.d_var
    a, b = state.a, state.b
    x, tau2 = m.d_tilde, m.tau2

    # Product of the inlier Gaussian with the prior Gaussian.
    s2 = 1.0 / (1.0 / sigma2 + 1.0 / tau2)
    mprod = s2 * (mu / sigma2 + x / tau2)

    c1 = (a / (a + b)) * _normal_pdf(x, mu, sigma2 + tau2)
    c2 = (b / (a + b)) * (1.0 / (state.d_max - state.d_min))
    total = c1 + c2
    c1 /= total
    c2 /= total

    # Posterior moments of the inlier probability.
    f1 = c1 * (a + 1.0) / (a + b + 1.0) + c2 * a / (a + b + 1.0)
    f2 = c1 * (a + 1.0) * (a + 2.0) / ((a + b + 1.0) * (a + b + 2.0)) + c2 * a * (
        a + 1.0
    ) / ((a + b + 1.0) * (a + b + 2.0))

    new_mean = c1 * mprod + c2 * mu
    new_var = c1 * (s2 + mprod * mprod) + c2 * (sigma2 + mu * mu) - new_mean * new_mean

    new_a = f1 * (f1 - f2) / (f2 - f1 * f1)
    new_b = new_a * (1.0 - f1) / f1

    clamp_events = state.clamp_events
    if not (state.d_min <= new_mean <= state.d_max):
        new_mean = min(max(new_mean, state.d_min), state.d_max)
        clamp_events += 1

    return replace(
        state,
        d_mean=float(new_mean),
        d_var=float(max(new_var, 1e-18)),
        a=float(max(new_a, 1e-12)),
        b=float(max(new_b, 1e-12)),
        n_updates=state.n_updates + 1,
        clamp_events=clamp_events,
    )


def has_converged(state: DepthFilterState, ratio_threshold: float) -> bool:
    """True once the depth standard deviation is a small fraction of the range."""
    return math.sqrt(state.d_var) < ratio_threshold * (state.d_max - state.d_min)


def _normal_pdf(x: float, mean: float, var: float) -> float:
    return math.exp(-0.5 * (x - mean) ** 2 / var) / math.sqrt(2.0 * math.pi * var)


def pixel_error_angle(K: CameraIntrinsics, pixels: float = 1.0) -> float:
    """Angle subtended by ``pixels`` of disparity at the mean focal length."""
    f = (K.fx + K.fy) / 2.0
    return 2.0 * math.atan(pixels / (2.0 * f))


def compute_tau2(
    T_ref_cur: PoseSE3, bearing: np.ndarray, depth: float, K: CameraIntrinsics
) -> float:
    """Variance of a triangulated depth caused by one pixel of disparity.

    ``T_ref_cur`` is the pose of the current camera expressed in the
    reference (birth-keyframe) frame, ``bearing`` the homogeneous reference
    bearing of the feature and ``depth`` its depth along that bearing.  The
    observation angle at the current camera is perturbed by the one-pixel
    angle and the depth re-triangulated via the law of sines; tau^2 is the
    squared depth change.

    Returns ``inf`` when the pair carries less than one pixel of parallax
    (including a bearing aligned with the baseline): depth is unobservable
    and the measurement should be skipped.

    Raises:
        DegenerateGeometryError: zero baseline or non-positive depth.
    """
    if depth <= 0:
        raise DegenerateGeometryError("depth must be positive")
    bearing = np.asarray(bearing, dtype=float).reshape(3)
    t = T_ref_cur.t
    t_norm = np.linalg.norm(t)
    if t_norm < 1e-12:
        raise DegenerateGeometryError("zero baseline between the two views")

    ray = bearing / np.linalg.norm(bearing)
    r = depth * np.linalg.norm(bearing)  # distance along the unit ray
    a = ray * r - t  # current camera -> point, in reference coords
    a_norm = np.linalg.norm(a)
    if a_norm < 1e-12:
        return math.inf

    alpha = math.acos(np.clip(np.dot(ray, t) / t_norm, -1.0, 1.0))
    beta = math.acos(np.clip(np.dot(a, -t) / (a_norm * t_norm), -1.0, 1.0))
    beta_plus = beta + pixel_error_angle(K)
    gamma_plus = math.pi - alpha - beta_plus
    if gamma_plus <= 0 or math.sin(gamma_plus) < 1e-12:
        return math.inf

    r_plus = t_norm * math.sin(beta_plus) / math.sin(gamma_plus)
    depth_plus = r_plus / np.linalg.norm(bearing)
    return float((depth_plus - depth) ** 2)


class FilterTrace:
    """Optional per-feature record of the belief after each update."""

    def __init__(self):
        self.rows: list[tuple[int, float, float, float, float]] = []

    def record(self, state: DepthFilterState) -> None:
        self.rows.append((state.n_updates, state.d_mean, state.d_var, state.a, state.b))

    def save_csv(self, path) -> None:
        from .io import write_csv

        write_csv(path, ("update", "d_mean", "d_var", "a", "b"), self.rows)
