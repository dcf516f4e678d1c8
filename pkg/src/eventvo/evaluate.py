"""Trajectory alignment and positional-error statistics.

A monocular estimate is defined up to a rigid transform (and scale), so the
estimated positions are first aligned onto ground truth by least squares.
Errors are then decomposed at each matched timestamp in the ground-truth
heading frame: longitudinal along the instantaneous horizontal direction of
travel, lateral perpendicular to it, planar the norm of the two.  The
relative error is the mean planar error divided by the ground-truth path
length, in percent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .geometry import PoseSE3

_MATCH_TOLERANCE = 0.010  # seconds
_HEADING_WINDOW = 0.2  # seconds of ground truth used for the velocity estimate


@dataclass
class Alignment:
    """Similarity transform mapping estimate positions onto ground truth."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray
    rmse: float

    def apply(self, positions: np.ndarray) -> np.ndarray:
        return self.scale * positions @ self.rotation.T + self.translation


def _positions(trajectory: list[tuple[float, PoseSE3]]) -> tuple[np.ndarray, np.ndarray]:
    ts = np.array([t for t, _ in trajectory])
    ps = np.array([pose.t for _, pose in trajectory])
    return ts, ps


def match_timestamps(
    t_est: np.ndarray, t_gt: np.ndarray, tolerance: float = _MATCH_TOLERANCE
) -> list[tuple[int, int]]:
    """Nearest-neighbour index pairs within the matching tolerance."""
    pairs = []
    for i, t in enumerate(t_est):
        j = int(np.searchsorted(t_gt, t))
        best, best_dt = None, tolerance
        for cand in (j - 1, j):
            if 0 <= cand < len(t_gt):
                dt = abs(t_gt[cand] - t)
                if dt <= best_dt:
                    best, best_dt = cand, dt
        if best is not None:
            pairs.append((i, best))
    return pairs


def align_trajectories(
    estimate: list[tuple[float, PoseSE3]],
    ground_truth: list[tuple[float, PoseSE3]],
    mode: str = "rigid+scale",
) -> Alignment:
    """Least-squares rigid (optionally scaled) alignment of matched positions.

    Raises:
        ValidationError: unknown mode or fewer than 3 timestamp matches.
    """
    if mode not in ("rigid", "rigid+scale"):
        raise ValidationError(f"unknown alignment mode {mode!r}")
    t_est, p_est = _positions(estimate)
    t_gt, p_gt = _positions(ground_truth)
    pairs = match_timestamps(t_est, t_gt)
    if len(pairs) < 3:
        raise ValidationError(
            f"need at least 3 timestamp-matched pose pairs, got {len(pairs)}"
        )
    src = p_est[[i for i, _ in pairs]]
    dst = p_gt[[j for _, j in pairs]]

    mu_src = src.mean(axis=0)
    mu_dst = dst.mean(axis=0)
    src_c = src - mu_src
    dst_c = dst - mu_dst
    cov = dst_c.T @ src_c / len(src)
    U, d, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if mode == "rigid+scale":
        var_src = (src_c**2).sum() / len(src)
        scale = float(np.trace(np.diag(d) @ S) / var_src)
    else:
        scale = 1.0
    t = mu_dst - scale * R @ mu_src
    residuals = dst - (scale * src @ R.T + t)
    rmse = float(np.sqrt((residuals**2).sum(axis=1).mean()))
    return Alignment(scale=scale, rotation=R, translation=t, rmse=rmse)


@dataclass
class ErrorReport:
    """Per-timestamp decomposition plus the summary rows of the error table."""

    timestamps: np.ndarray
    longitudinal: np.ndarray  # NaN where the heading is undefined
    lateral: np.ndarray
    planar: np.ndarray
    mean_longitudinal: float
    mean_lateral: float
    mean_planar: float
    rel_longitudinal_pct: float
    rel_lateral_pct: float
    rel_planar_pct: float
    path_length: float
    alignment: Alignment | None = None

    def rows(self):
        for i, t in enumerate(self.timestamps):
            yield (float(t), float(self.longitudinal[i]), float(self.lateral[i]),
                   float(self.planar[i]))

    def summary_lines(self) -> list[str]:
        return [
            "Item            Longitudinal    Lateral         Planar",
            (f"Average error   {self.mean_longitudinal:<15.4f} "
             f"{self.mean_lateral:<15.4f} {self.mean_planar:.4f}  (m)"),
            (f"Relative error  {self.rel_longitudinal_pct:<14.4f}% "
             f"{self.rel_lateral_pct:<14.4f}% {self.rel_planar_pct:.4f}%"),
            f"Path length     {self.path_length:.3f} m",
        ]


def _heading(t_gt: np.ndarray, p_gt: np.ndarray, idx: int) -> np.ndarray | None:
    """Smoothed horizontal direction of travel at a ground-truth sample."""
    t = t_gt[idx]
    half = _HEADING_WINDOW / 2.0
    lo = int(np.searchsorted(t_gt, t - half, side="left"))
    hi = int(np.searchsorted(t_gt, t + half, side="right")) - 1
    if hi <= lo:
        lo = max(idx - 1, 0)
        hi = min(idx + 1, len(t_gt) - 1)
        if hi == lo:
            return None
    delta = p_gt[hi] - p_gt[lo]
    horiz = delta[:2]
    norm = np.linalg.norm(horiz)
    if norm < 1e-9:
        return None
    return horiz / norm


def compute_position_errors(
    estimate: list[tuple[float, PoseSE3]],
    ground_truth: list[tuple[float, PoseSE3]],
    alignment: Alignment | None = None,
) -> ErrorReport:
    """Heading-frame error statistics of an (already aligned) estimate.

    Pass ``alignment`` to apply a transform from :func:`align_trajectories`
    first.  At samples with undefined heading (stationary ground truth) the
    longitudinal/lateral split is NaN while the planar error is still
    reported.
    """
    t_est, p_est = _positions(estimate)
    t_gt, p_gt = _positions(ground_truth)
    if alignment is not None:
        p_est = alignment.apply(p_est)
    pairs = match_timestamps(t_est, t_gt)
    if len(pairs) < 1:
        raise ValidationError("no timestamp matches between estimate and ground truth")

    ts, lon, lat, planar = [], [], [], []
    for i, j in pairs:
        diff = p_est[i] - p_gt[j]
        horiz = diff[:2]
        heading = _heading(t_gt, p_gt, j)
        ts.append(t_gt[j])
        planar.append(float(np.linalg.norm(horiz)))
        if heading is None:
            lon.append(float("nan"))
            lat.append(float("nan"))
        else:
            lateral_dir = np.array([-heading[1], heading[0]])
            lon.append(float(horiz @ heading))
            lat.append(float(horiz @ lateral_dir))

    gt_idx = sorted({j for _, j in pairs})
    segment = p_gt[gt_idx]
    path_length = float(np.linalg.norm(np.diff(segment, axis=0), axis=1).sum())

    lon_arr = np.array(lon)
    lat_arr = np.array(lat)
    planar_arr = np.array(planar)
    defined = ~np.isnan(lon_arr)
    mean_lon = float(np.abs(lon_arr[defined]).mean()) if defined.any() else float("nan")
    mean_lat = float(np.abs(lat_arr[defined]).mean()) if defined.any() else float("nan")
    mean_planar = float(planar_arr.mean())

    def rel(value: float) -> float:
        return 100.0 * value / path_length if path_length > 0 else float("nan")

    return ErrorReport(
        timestamps=np.array(ts),
        longitudinal=lon_arr,
        lateral=lat_arr,
        planar=planar_arr,
        mean_longitudinal=mean_lon,
        mean_lateral=mean_lat,
        mean_planar=mean_planar,
        rel_longitudinal_pct=rel(mean_lon),
        rel_lateral_pct=rel(mean_lat),
        rel_planar_pct=rel(mean_planar),
        path_length=path_length,
        alignment=alignment,
    )
