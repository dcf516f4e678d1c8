"""Ground-truth scene, trajectory, track and event-stream generation.

World frame: x/y horizontal, z up.  The camera drives in the horizontal
plane (forward speed plus an optional yaw ramp) looking along its direction
of travel; the optical axis is the camera z axis, camera x points right and
camera y points down.  Landmarks flank the path and are observed as noisy
feature tracks with a per-frame loss rate; new features are born only on
keyframes, mirroring the odometry pipeline's detection policy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields as dataclass_fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, GenerationError, ParseError
from .geometry import CameraIntrinsics, PoseSE3, project
from .io import Config, Event, write_feature_tracks, write_trajectory

_CAMERA_HEIGHT = 1.2


@dataclass
class SceneSpec:
    """Parameters of a synthetic drive; readable from a ``key = value`` file."""

    n_landmarks: int = 500
    n_frames: int = 200
    frame_interval: float = 0.03
    speed: float = 4.0
    turn_deg: float = 40.0
    turn_start: int = 70
    turn_end: int = 130
    sigma_px: float = 1.0
    loss_rate: float = 0.05
    keyframe_period: int = 5
    seed: int = 7
    width: int = 480
    height: int = 360
    fx: float = 400.0
    fy: float = 400.0
    cx: float = 240.0
    cy: float = 180.0
    lateral_spread: float = 5.0
    corridor: float = 1.2
    depth_ahead: float = 6.0
    render_events: bool = False
    events_per_px: float = 3.0
    noise_events_per_frame: int = 0

    def __post_init__(self):
        if self.n_landmarks <= 0 or self.n_frames < 2:
            raise GenerationError("need at least one landmark and two frames")
        if not (0.0 <= self.loss_rate < 1.0):
            raise GenerationError("loss rate must be in [0, 1)")
        if self.speed <= 0 or self.frame_interval <= 0:
            raise GenerationError("speed and frame interval must be positive")

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(
            fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy,
            width=self.width, height=self.height,
        )


_INT_SPEC_KEYS = {
    "n_landmarks", "n_frames", "turn_start", "turn_end", "keyframe_period",
    "seed", "width", "height", "noise_events_per_frame",
}
_BOOL_SPEC_KEYS = {"render_events"}


def load_scene_spec(path) -> SceneSpec:
    """Parse a scene-spec file (same grammar as the run config)."""
    path = Path(path)
    known = {f.name for f in dataclass_fields(SceneSpec)}
    values: dict = {}
    for line_no, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(path, line_no, "expected 'key = value'")
        key, _, text = line.partition("=")
        key = key.strip()
        text = text.strip()
        if key not in known:
            raise ConfigError(f"{path}:{line_no}: unknown scene key '{key}'")
        try:
            if key in _BOOL_SPEC_KEYS:
                values[key] = bool(int(text))
            elif key in _INT_SPEC_KEYS:
                values[key] = int(text)
            else:
                values[key] = float(text)
        except ValueError as exc:
            raise ParseError(path, line_no, f"bad value for '{key}': {text!r}") from exc
    return SceneSpec(**values)


@dataclass
class SyntheticScene:
    """Everything a replay run or an evaluation needs."""

    spec: SceneSpec
    landmarks: np.ndarray  # (N, 3) world coordinates
    poses_world: list[PoseSE3]  # camera-to-world per frame
    timestamps: np.ndarray
    tracks: dict[int, dict[int, tuple[float, float]]]
    events: list[Event] = field(default_factory=list)

    def intrinsics(self) -> CameraIntrinsics:
        return self.spec.intrinsics()

    def run_config(self, **overrides) -> Config:
        """A pipeline config matched to this scene's camera and cadence."""
        values = dict(
            width=self.spec.width, height=self.spec.height,
            fx=self.spec.fx, fy=self.spec.fy, cx=self.spec.cx, cy=self.spec.cy,
            frame_interval=self.spec.frame_interval,
            keyframe_period=self.spec.keyframe_period,
            seed=self.spec.seed,
            d_min=0.2, d_max=200.0,
            bootstrap_min_disparity=24.0,
        )
        values.update(overrides)
        return Config(**values)


def _camera_to_world(position: np.ndarray, yaw: float) -> PoseSE3:
    forward = np.array([math.cos(yaw), math.sin(yaw), 0.0])
    right = np.array([math.sin(yaw), -math.cos(yaw), 0.0])
    down = np.array([0.0, 0.0, -1.0])
    R_wc = np.column_stack([right, down, forward])
    return PoseSE3(R_wc, position, check=False)


def _trajectory(spec: SceneSpec) -> tuple[list[PoseSE3], np.ndarray]:
    poses = []
    position = np.array([0.0, 0.0, _CAMERA_HEIGHT])
    yaw = 0.0
    turn_frames = max(spec.turn_end - spec.turn_start, 1)
    yaw_step = math.radians(spec.turn_deg) / turn_frames
    timestamps = np.arange(spec.n_frames) * spec.frame_interval
    for k in range(spec.n_frames):
        poses.append(_camera_to_world(position.copy(), yaw))
        if spec.turn_start <= k < spec.turn_end:
            yaw += yaw_step
        position = position + spec.speed * spec.frame_interval * np.array(
            [math.cos(yaw), math.sin(yaw), 0.0]
        )
    return poses, timestamps


def _landmarks(spec: SceneSpec, poses: list[PoseSE3], rng: np.random.Generator) -> np.ndarray:
    """Scatter points flanking the path, extended past its end."""
    path = np.array([p.t for p in poses])
    headings = []
    for k in range(len(poses)):
        fwd = poses[k].R[:, 2]
        headings.append(fwd / np.linalg.norm(fwd))
    headings = np.array(headings)

    # Extend the anchor arc beyond the path end so late frames still face a
    # populated field.
    step = spec.speed * spec.frame_interval
    n_extra = int(math.ceil(spec.depth_ahead / max(step, 1e-9)))
    tail = [path[-1] + headings[-1] * step * (i + 1) for i in range(n_extra)]
    path = np.vstack([path, tail])
    headings = np.vstack([headings, np.tile(headings[-1], (n_extra, 1))])

    pts = []
    n_anchor = len(path)
    path_xy = path[:, :2]
    for _ in range(spec.n_landmarks):
        for _attempt in range(50):
            anchor = int(rng.integers(0, n_anchor))
            ahead = rng.uniform(1.0, spec.depth_ahead)
            side = rng.uniform(spec.corridor, spec.lateral_spread)
            if rng.random() < 0.5:
                side = -side
            height = rng.uniform(-0.5, 3.0)
            fwd = headings[anchor]
            lateral = np.array([fwd[1], -fwd[0], 0.0])
            p = path[anchor] + ahead * fwd + side * lateral
            p[2] = height
            # keep the whole path outside the landmark's corridor radius
            if np.min(np.linalg.norm(path_xy - p[:2], axis=1)) >= spec.corridor:
                pts.append(p)
                break
    return np.array(pts)


def _visible_map(landmarks: np.ndarray, pose_wc: PoseSE3, K: CameraIntrinsics) -> dict:
    """Landmark index -> pixel position for all landmarks seen by this pose."""
    cam = (landmarks - pose_wc.t) @ pose_wc.R  # world -> camera for each row
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * cam[:, 0] / z + K.cx
        v = K.fy * cam[:, 1] / z + K.cy
    ok = (z > 0.2) & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
    return {int(i): np.array([u[i], v[i]]) for i in np.nonzero(ok)[0]}


def generate_scene(spec: SceneSpec) -> SyntheticScene:
    """Simulate the drive and its feature tracks (optionally events).

    Raises:
        GenerationError: the camera path passes through the landmark cloud,
            or no landmark is visible in at least two frames.
    """
    rng = np.random.default_rng(spec.seed)
    poses, timestamps = _trajectory(spec)
    K = spec.intrinsics()
    landmarks = _landmarks(spec, poses, rng)

    path = np.array([p.t for p in poses])
    dists = np.linalg.norm(
        landmarks[None, :, :] - path[:, None, :], axis=2
    )
    if dists.min() < 0.3:
        raise GenerationError("camera path passes inside the landmark cloud")

    visibility = [_visible_map(landmarks, pose, K) for pose in poses]
    counts = np.zeros(len(landmarks), dtype=int)
    for vis in visibility:
        for li in vis:
            counts[li] += 1
    keep = counts >= 2
    if not keep.any():
        raise GenerationError("no landmark is visible in at least two frames")

    tracks: dict[int, dict[int, tuple[float, float]]] = {}
    live: dict[int, int] = {}  # landmark index -> active feature id
    truth_paths: dict[int, list[tuple[int, np.ndarray]]] = {}
    next_fid = 0
    for k in range(spec.n_frames):
        frame_obs: dict[int, tuple[float, float]] = {}
        vis = visibility[k]
        for li in sorted(live):
            fid = live[li]
            if li not in vis:
                del live[li]
                continue
            if rng.random() < spec.loss_rate:
                del live[li]
                continue
            uv = vis[li] + rng.normal(0.0, spec.sigma_px, 2) if spec.sigma_px > 0 else vis[li]
            if not (0 <= uv[0] < K.width and 0 <= uv[1] < K.height):
                del live[li]
                continue
            frame_obs[fid] = (float(uv[0]), float(uv[1]))
            truth_paths[fid].append((k, vis[li]))
        if k % spec.keyframe_period == 0:
            for li in sorted(vis):
                if li in live or not keep[li]:
                    continue
                fid = next_fid
                next_fid += 1
                live[li] = fid
                uv = vis[li] + rng.normal(0.0, spec.sigma_px, 2) if spec.sigma_px > 0 else vis[li]
                if not (0 <= uv[0] < K.width and 0 <= uv[1] < K.height):
                    del live[li]
                    continue
                frame_obs[fid] = (float(uv[0]), float(uv[1]))
                truth_paths[fid] = [(k, vis[li])]
        tracks[k] = frame_obs

    events = _render_events(spec, truth_paths, timestamps, rng) if spec.render_events else []
    return SyntheticScene(
        spec=spec, landmarks=landmarks, poses_world=poses,
        timestamps=timestamps, tracks=tracks, events=events,
    )


def _render_events(
    spec: SceneSpec,
    truth_paths: dict[int, list[tuple[int, np.ndarray]]],
    timestamps: np.ndarray,
    rng: np.random.Generator,
) -> list[Event]:
    """Emit events along each feature's noiseless image-motion path."""
    raw: list[tuple[float, int, int, int]] = []
    for fid in sorted(truth_paths):
        path = truth_paths[fid]
        for (k0, uv0), (k1, uv1) in zip(path, path[1:]):
            if k1 != k0 + 1:
                break
            seg = np.linalg.norm(uv1 - uv0)
            n = max(2, int(math.ceil(spec.events_per_px * max(seg, 1.0))))
            for i in range(n):
                frac = (i + 0.5) / n
                t = timestamps[k0] + frac * spec.frame_interval
                uv = uv0 + frac * (uv1 - uv0)
                x, y = int(round(uv[0])), int(round(uv[1]))
                if 0 <= x < spec.width and 0 <= y < spec.height:
                    pol = 1 if (uv1 - uv0)[0] >= 0 else 0
                    raw.append((t, x, y, pol))
    for k in range(spec.n_frames - 1):
        for _ in range(spec.noise_events_per_frame):
            t = timestamps[k] + rng.uniform(0, spec.frame_interval)
            raw.append((
                t, int(rng.integers(0, spec.width)), int(rng.integers(0, spec.height)),
                int(rng.integers(0, 2)),
            ))
    raw.sort(key=lambda r: (r[0], r[1], r[2], r[3]))
    return [Event(t=t, x=x, y=y, p=1 if p == 1 else -1) for t, x, y, p in raw]


def write_scene(scene: SyntheticScene, out_dir) -> dict[str, Path]:
    """Write tracks, ground-truth trajectory, config and optional events."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "tracks": out / "tracks.txt",
        "trajectory": out / "gt_trajectory.txt",
        "config": out / "run_config.cfg",
    }
    write_feature_tracks(paths["tracks"], scene.tracks)
    write_trajectory(
        paths["trajectory"],
        list(zip(scene.timestamps.tolist(), scene.poses_world)),
    )
    cfg = scene.run_config()
    lines = [
        "# pipeline config generated alongside the synthetic scene",
        f"width = {cfg.width}", f"height = {cfg.height}",
        f"fx = {cfg.fx}", f"fy = {cfg.fy}", f"cx = {cfg.cx}", f"cy = {cfg.cy}",
        f"frame_interval = {cfg.frame_interval}",
        f"keyframe_period = {cfg.keyframe_period}",
        f"d_min = {cfg.d_min}", f"d_max = {cfg.d_max}",
        f"bootstrap_min_disparity = {cfg.bootstrap_min_disparity}",
        f"seed = {cfg.seed}",
    ]
    paths["config"].write_text("\n".join(lines) + "\n")
    if scene.events:
        paths["events"] = out / "events.txt"
        with open(paths["events"], "w") as fh:
            for e in scene.events:
                fh.write(f"{e.t:.9f} {e.x} {e.y} {1 if e.p > 0 else 0}\n")
    return paths
