"""Readers and writers for every external text format.

Formats (ASCII, space separated, ``#`` starts a comment line in configs):

* event stream:   ``t x y p``            with ``p`` in {0, 1}
* feature tracks: ``frame_id feature_id u v``
* trajectory:     ``t tx ty tz qx qy qz qw``  (camera-to-world, unit quaternion)
* ground truth:   same as trajectory
* config:         ``key = value`` lines
* map dump:       ``id x y z``
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields as dataclass_fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import ConfigError, EventVOError, ParseError, ValidationError
from .geometry import PoseSE3

log = logging.getLogger("eventvo.io")


@dataclass(frozen=True)
class Event:
    """One asynchronous brightness-change sample."""

    t: float
    x: int
    y: int
    p: int  # -1 or +1


@dataclass(frozen=True)
class TrackRecord:
    """One observation of a tracked feature in one frame."""

    frame_id: int
    feature_id: int
    u: float
    v: float


@dataclass
class Config:
    """Run parameters, readable from a flat ``key = value`` file.

    ``width``/``height`` and the intrinsics are required in files; everything
    else falls back to the defaults below.
    """

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    frame_interval: float = 0.03
    keyframe_period: int = 5
    gn_max_iters: int = 20
    gn_tol: float = 1e-8
    huber_delta: float = 1.5
    d_min: float = 0.5
    d_max: float = 50.0
    depth_convergence_ratio: float = 0.005
    queue_capacity: int = 64
    seed: int = 0
    min_tracked_features: int = 8
    refill_threshold: int = 20
    max_features: int = 120
    min_feature_distance: float = 5.0
    em_window_radius: float = 12.0
    depth_measurement_gate: float = 0.3
    bootstrap_min_disparity: float = 8.0
    bootstrap_baseline: float = 1.0

    def __post_init__(self):
        positive = (
            "width", "height", "fx", "fy", "frame_interval", "keyframe_period",
            "gn_max_iters", "gn_tol", "huber_delta", "d_min", "d_max",
            "depth_convergence_ratio", "queue_capacity", "min_tracked_features",
            "max_features", "min_feature_distance", "em_window_radius",
            "depth_measurement_gate", "bootstrap_baseline",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"config key '{name}' must be positive")
        if self.d_min >= self.d_max:
            raise ConfigError("config requires d_min < d_max")

    def intrinsics(self):
        from .geometry import CameraIntrinsics

        return CameraIntrinsics(
            fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy,
            width=self.width, height=self.height,
        )


_REQUIRED_CONFIG_KEYS = ("width", "height", "fx", "fy", "cx", "cy")
_INT_CONFIG_KEYS = {
    "width", "height", "keyframe_period", "gn_max_iters", "queue_capacity",
    "seed", "min_tracked_features", "refill_threshold", "max_features",
}


def load_config(path) -> Config:
    """Parse a ``key = value`` config file into a :class:`Config`."""
    path = Path(path)
    known = {f.name for f in dataclass_fields(Config)}
    values: dict = {}
    for line_no, raw in enumerate(_read_lines(path), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(path, line_no, "expected 'key = value'")
        key, _, text = line.partition("=")
        key = key.strip()
        text = text.strip()
        if key not in known:
            raise ConfigError(f"{path}:{line_no}: unknown config key '{key}'")
        try:
            values[key] = int(text) if key in _INT_CONFIG_KEYS else float(text)
        except ValueError as exc:
            raise ParseError(path, line_no, f"bad value for '{key}': {text!r}") from exc
    missing = [k for k in _REQUIRED_CONFIG_KEYS if k not in values]
    if missing:
        raise ConfigError(f"{path}: missing required config key '{missing[0]}'")
    return Config(**values)


def _read_lines(path: Path) -> list[str]:
    try:
        return path.read_text().splitlines()
    except OSError as exc:
        raise EventVOError(f"cannot read {path}: {exc}") from exc


def load_event_stream(path, config: Config) -> list[Event]:
    """Read an ASCII event file, mapping polarity {0, 1} to {-1, +1}.

    Lines are returned in file order.  Timestamp monotonicity violations are
    logged as warnings with their line numbers; malformed lines and
    out-of-bounds coordinates raise.
    """
    path = Path(path)
    events: list[Event] = []
    prev_t = None
    for line_no, raw in enumerate(_read_lines(path), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ParseError(path, line_no, f"expected 't x y p', got {len(parts)} fields")
        try:
            t = float(parts[0])
            x = int(parts[1])
            y = int(parts[2])
            p_raw = int(parts[3])
        except ValueError as exc:
            raise ParseError(path, line_no, f"non-numeric token in {line!r}") from exc
        if p_raw not in (0, 1):
            raise ParseError(path, line_no, f"polarity must be 0 or 1, got {p_raw}")
        if t < 0:
            raise ValidationError(f"{path}:{line_no}: negative timestamp {t}")
        if not (0 <= x < config.width and 0 <= y < config.height):
            raise ValidationError(
                f"{path}:{line_no}: pixel ({x}, {y}) outside "
                f"{config.width}x{config.height} sensor"
            )
        if prev_t is not None and t < prev_t:
            log.warning("%s:%d: timestamp %.9g decreases from %.9g", path, line_no, t, prev_t)
        prev_t = t
        events.append(Event(t=t, x=x, y=y, p=1 if p_raw == 1 else -1))
    return events


def events_to_arrays(events: Sequence[Event]):
    """Split a list of events into (t, x, y, p) numpy arrays."""
    n = len(events)
    t = np.empty(n)
    x = np.empty(n, dtype=np.int64)
    y = np.empty(n, dtype=np.int64)
    p = np.empty(n, dtype=np.int64)
    for i, e in enumerate(events):
        t[i], x[i], y[i], p[i] = e.t, e.x, e.y, e.p
    return t, x, y, p


def load_feature_tracks(
    path, width: int | None = None, height: int | None = None
) -> dict[int, dict[int, tuple[float, float]]]:
    """Read a track file, grouped by frame_id ascending.

    Returns ``{frame_id: {feature_id: (u, v)}}``.  Duplicate
    (frame_id, feature_id) pairs are rejected; bounds are checked when the
    sensor size is given.
    """
    path = Path(path)
    frames: dict[int, dict[int, tuple[float, float]]] = {}
    for line_no, raw in enumerate(_read_lines(path), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ParseError(
                path, line_no, f"expected 'frame_id feature_id u v', got {len(parts)} fields"
            )
        try:
            frame_id = int(parts[0])
            feature_id = int(parts[1])
            u = float(parts[2])
            v = float(parts[3])
        except ValueError as exc:
            raise ParseError(path, line_no, f"non-numeric token in {line!r}") from exc
        if frame_id < 0 or feature_id < 0:
            raise ValidationError(f"{path}:{line_no}: ids must be non-negative")
        if width is not None and height is not None and not (0 <= u < width and 0 <= v < height):
            raise ValidationError(
                f"{path}:{line_no}: coordinate ({u}, {v}) outside {width}x{height} sensor"
            )
        per_frame = frames.setdefault(frame_id, {})
        if feature_id in per_frame:
            raise ValidationError(
                f"{path}:{line_no}: duplicate observation of feature "
                f"{feature_id} in frame {frame_id}"
            )
        per_frame[feature_id] = (u, v)
    return dict(sorted(frames.items()))


def write_feature_tracks(path, frames: dict[int, dict[int, tuple[float, float]]]) -> None:
    """Write per-frame feature maps in the track file format."""
    path = Path(path)
    lines = []
    for frame_id in sorted(frames):
        for feature_id in sorted(frames[frame_id]):
            u, v = frames[frame_id][feature_id]
            lines.append(f"{frame_id} {feature_id} {u:.6f} {v:.6f}")
    _write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def write_trajectory(path, poses: Sequence[tuple[float, PoseSE3]]) -> None:
    """Write timestamped poses as ``t tx ty tz qx qy qz qw`` lines.

    Timestamps must be strictly increasing; components use 9 significant
    digits so a round trip recovers each pose within 1e-8.
    """
    path = Path(path)
    lines = []
    prev_t = None
    for t, pose in poses:
        if prev_t is not None and t <= prev_t:
            raise ValidationError(
                f"trajectory timestamps must be strictly increasing "
                f"({t:.9g} after {prev_t:.9g})"
            )
        prev_t = t
        q = Rotation.from_matrix(pose.R).as_quat()  # (qx, qy, qz, qw)
        q = q / np.linalg.norm(q)
        vals = " ".join(f"{v:.9g}" for v in (*pose.t, *q))
        lines.append(f"{t:.9f} {vals}")
    _write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def load_trajectory(path) -> list[tuple[float, PoseSE3]]:
    """Read a trajectory file written by :func:`write_trajectory`."""
    path = Path(path)
    out: list[tuple[float, PoseSE3]] = []
    for line_no, raw in enumerate(_read_lines(path), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ParseError(path, line_no, f"expected 8 fields, got {len(parts)}")
        try:
            t, tx, ty, tz, qx, qy, qz, qw = (float(v) for v in parts)
        except ValueError as exc:
            raise ParseError(path, line_no, f"non-numeric token in {line!r}") from exc
        q = np.array([qx, qy, qz, qw])
        norm = np.linalg.norm(q)
        if abs(norm - 1.0) > 1e-3:
            raise ValidationError(f"{path}:{line_no}: quaternion norm {norm:.6g} far from 1")
        R = Rotation.from_quat(q / norm).as_matrix()
        out.append((t, PoseSE3(R, np.array([tx, ty, tz]), check=False)))
    return out


def write_map_points(path, points: dict[int, np.ndarray]) -> None:
    """Write map points as ``id x y z`` lines sorted by id."""
    lines = [
        f"{pid} " + " ".join(f"{c:.9g}" for c in points[pid])
        for pid in sorted(points)
    ]
    _write_text(Path(path), "\n".join(lines) + ("\n" if lines else ""))


def write_pgm(path, image: np.ndarray) -> None:
    """Dump a non-negative 2D array as an 8-bit ASCII PGM for debugging."""
    image = np.asarray(image, dtype=float)
    peak = image.max()
    scaled = np.zeros_like(image) if peak <= 0 else image * (255.0 / peak)
    pixels = np.rint(scaled).astype(int)
    h, w = pixels.shape
    rows = "\n".join(" ".join(str(v) for v in row) for row in pixels)
    _write_text(Path(path), f"P2\n{w} {h}\n255\n{rows}\n")


def _write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise EventVOError(f"cannot write {path}: {exc}") from exc


def write_csv(path, header: Iterable[str], rows: Iterable[Sequence]) -> None:
    """Write a simple comma-separated file with one header line."""
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(f"{v:.9g}" if isinstance(v, float) else str(v) for v in row))
    _write_text(Path(path), "\n".join(lines) + "\n")
