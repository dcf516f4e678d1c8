"""Odometry orchestration: bootstrap, pose tracking and FIFO-decoupled mapping.

The tracking lane is synchronous: every tracked frame immediately yields a
pose (optimized against the global map, or held at the constant-position
prediction while the map is starved).  Tracked frames and their poses are
pushed onto a bounded FIFO from which the mapping lane pops work: it
triangulates each live feature against its birth keyframe, updates the depth
filter, and promotes converged features to immutable map points.  In
deterministic mode exactly one depth step runs after each tracked frame;
otherwise the queue is drained.
"""

from __future__ import annotations

import enum
import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import depth as depth_filter
from .depth import DepthFilterState, DepthMeasurement
from .errors import (
    BootstrapDeferred,
    DegenerateGeometryError,
    DecompositionError,
    GeometryError,
    UnderdeterminedError,
)
from .frames import EventFrame, Feature, detect_harris, em_flow_correct, track_features
from .geometry import PoseSE3, decompose_essential, eight_point, se3_exp, se3_log, triangulate
from .io import Config, Event
from .pose import Observation, OptimizerReport, optimize_pose, residual_at_pose

log = logging.getLogger("eventvo.pipeline")


class Mode(enum.Enum):
    AWAITING_FIRST = "awaiting-first-frame"
    AWAITING_SECOND = "awaiting-second-frame"
    TRACKING = "tracking"
    LOST = "lost"


@dataclass
class _LiveFeature:
    feature_id: int
    uv: np.ndarray
    birth_frame: int
    birth_keyframe_id: int
    birth_uv: np.ndarray
    lifetime: int = 1
    map_point_id: int | None = None
    filter: DepthFilterState | None = None
    # Bootstrap seeds stay usable for tracking while their filter keeps
    # refining; promotion then rebinds them to the refined point.
    provisional: bool = False


@dataclass
class GlobalMap:
    """Promoted 3D points and keyframe poses (world-to-camera)."""

    points: dict[int, np.ndarray] = field(default_factory=dict)
    keyframes: dict[int, PoseSE3] = field(default_factory=dict)
    _next_point_id: int = 0

    def add_point(self, p: np.ndarray) -> int:
        pid = self._next_point_id
        self.points[pid] = np.asarray(p, dtype=float)
        self._next_point_id += 1
        return pid


@dataclass
class _PendingFrame:
    frame_id: int
    t: float
    obs: dict[int, np.ndarray]
    pose: PoseSE3  # world-to-camera, fixed at push time


def keyframe_due(frame_id: int, live_count: int, config: Config) -> bool:
    """Periodic keyframe rule plus the low-track-count refill trigger."""
    return frame_id % config.keyframe_period == 0 or live_count < config.refill_threshold


class Pipeline:
    """Stateful odometry engine consuming per-frame feature observations."""

    def __init__(self, config: Config, deterministic: bool = False):
        self.config = config
        self.K = config.intrinsics()
        self.deterministic = deterministic
        self.mode = Mode.AWAITING_FIRST
        self.pose = PoseSE3.identity()  # world-to-camera of the latest frame
        self.map = GlobalMap()
        self.live: dict[int, _LiveFeature] = {}
        self.queue: deque[_PendingFrame] = deque()
        self.trajectory: list[tuple[float, PoseSE3]] = []  # world-to-camera
        self.first_frame_id: int | None = None
        self.bootstrap_frame: int | None = None
        self.filter_d_min = config.d_min
        self.filter_d_max = config.d_max
        self.lost_at: int | None = None
        self.frames_processed = 0
        self.keyframe_ids: list[int] = []
        self.drops = 0
        self.queued = 0
        self.promotions = 0
        self.stale_skips = 0
        self.measurement_skips = 0
        self.outlier_drops = 0
        self.last_report: OptimizerReport | None = None

    # ------------------------------------------------------------------ feed

    def process_tracked_frame(self, frame_id: int, t: float, observations: dict) -> None:
        """Advance the state machine with one frame's feature observations.

        ``observations`` maps feature_id to a pixel position (u, v).
        """
        if self.mode is Mode.LOST:
            return
        self.frames_processed += 1
        obs = {int(fid): np.asarray(uv, dtype=float) for fid, uv in observations.items()}
        if self.mode is Mode.AWAITING_FIRST:
            self._start(frame_id, t, obs)
        elif self.mode is Mode.AWAITING_SECOND:
            self._try_bootstrap(frame_id, t, obs)
        else:
            self._track(frame_id, t, obs)

    def _start(self, frame_id: int, t: float, obs: dict) -> None:
        self.first_frame_id = frame_id
        self.map.keyframes[frame_id] = PoseSE3.identity()
        self.keyframe_ids.append(frame_id)
        for fid, uv in obs.items():
            self.live[fid] = _LiveFeature(
                feature_id=fid, uv=uv, birth_frame=frame_id,
                birth_keyframe_id=frame_id, birth_uv=uv.copy(),
            )
        self.trajectory.append((t, PoseSE3.identity()))
        self.mode = Mode.AWAITING_SECOND

    def _update_live(self, obs: dict) -> None:
        for fid in list(self.live):
            if fid in obs:
                self.live[fid].uv = obs[fid]
                self.live[fid].lifetime += 1
            else:
                del self.live[fid]

    def _try_bootstrap(self, frame_id: int, t: float, obs: dict) -> None:
        self._update_live(obs)
        if not self.live:
            self._declare_lost(frame_id)
            return
        try:
            pose = self.bootstrap(frame_id, obs)
        except BootstrapDeferred as exc:
            # The pose of a pre-initialization frame is unknowable; it is
            # omitted from the trajectory rather than fabricated.
            log.debug("bootstrap deferred at frame %d: %s", frame_id, exc)
            return
        self.pose = pose
        self.bootstrap_frame = frame_id
        self.trajectory.append((t, pose))
        self.mode = Mode.TRACKING

    def bootstrap(self, frame_id: int, obs: dict) -> PoseSE3:
        """Two-view initialization against the first frame.

        Estimates the relative pose by the eight-point algorithm (scaled to
        the configured baseline), triangulates every correspondence, and
        seeds surviving points into the map with fresh depth filters.

        Raises:
            BootstrapDeferred: fewer than 8 pairs, insufficient parallax, or
                degenerate estimation; the caller should wait for more frames.
        """
        pairs = [f for f in self.live.values() if f.feature_id in obs]
        if len(pairs) < 8:
            raise BootstrapDeferred(f"only {len(pairs)} tracked pairs, need 8")
        disparities = [float(np.linalg.norm(f.uv - f.birth_uv)) for f in pairs]
        if np.median(disparities) < self.config.bootstrap_min_disparity:
            raise BootstrapDeferred(
                f"median disparity {np.median(disparities):.2f} px below "
                f"{self.config.bootstrap_min_disparity} px"
            )
        x1 = np.array([self.K.bearing(*f.birth_uv) for f in pairs])
        x2 = np.array([self.K.bearing(*f.uv) for f in pairs])
        try:
            E = eight_point(x1, x2)
            R, t_dir = decompose_essential(E, x1, x2)
        except (DegenerateGeometryError, DecompositionError, UnderdeterminedError) as exc:
            raise BootstrapDeferred(f"two-view geometry degenerate: {exc}") from exc
        t_vec = t_dir * self.config.bootstrap_baseline
        pose = PoseSE3(R, t_vec, check=False)

        seeds = []
        for feat, b1, b2 in zip(pairs, x1, x2):
            try:
                z1, _, _ = triangulate(b1, b2, R, t_vec)
                tau2 = depth_filter.compute_tau2(pose.inverse(), b1, z1, self.K)
            except GeometryError:
                continue
            if not np.isfinite(tau2):
                continue
            if not (self.config.d_min <= z1 <= self.config.d_max):
                continue
            seeds.append((feat, b1, z1, tau2))
        if len(seeds) < self.config.min_tracked_features:
            raise BootstrapDeferred(f"only {len(seeds)} points survived triangulation")

        # The monocular map scale is arbitrary until here; derive the working
        # depth-prior range for all filters from the seeded depths so the
        # uniform prior and the convergence threshold match the scene scale.
        zs = np.array([z for _, _, z, _ in seeds])
        self.filter_d_min = float(max(self.config.d_min, np.percentile(zs, 5) / 3.0))
        self.filter_d_max = float(min(self.config.d_max, np.percentile(zs, 95) * 3.0))

        ref_in_world = self.map.keyframes[self.first_frame_id]  # identity
        for feat, b1, z1, tau2 in seeds:
            point_world = ref_in_world.inverse().apply(z1 * b1)
            feat.map_point_id = self.map.add_point(point_world)
            feat.provisional = True
            feat.filter = DepthFilterState(
                d_mean=float(np.clip(z1, self.filter_d_min, self.filter_d_max)),
                d_var=tau2, a=10.0, b=10.0,
                d_min=self.filter_d_min, d_max=self.filter_d_max,
                keyframe_id=feat.birth_keyframe_id,
            )
        return pose

    # ------------------------------------------------------------- tracking

    def _track(self, frame_id: int, t: float, obs: dict) -> None:
        self._update_live(obs)
        if not obs:
            self._declare_lost(frame_id)
            return

        # A landmark drifting into the near field would dominate the normal
        # equations through its 1/z Jacobian; leave such features to the
        # residual-based cull instead of fitting against them.
        z_floor = 0.25 * self.filter_d_min
        bound_feats = [
            f for f in self.live.values()
            if f.map_point_id is not None
            and f.feature_id in obs
            and self.pose.apply(self.map.points[f.map_point_id])[2] > z_floor
        ]
        bound = [
            Observation(uv=f.uv, point=self.map.points[f.map_point_id])
            for f in bound_feats
        ]
        if len(bound) >= self.config.min_tracked_features:
            try:
                xi, report = optimize_pose(
                    se3_log(self.pose), bound, self.K,
                    max_iters=self.config.gn_max_iters,
                    tol=self.config.gn_tol,
                    huber_delta=self.config.huber_delta,
                )
            except (UnderdeterminedError, DegenerateGeometryError) as exc:
                log.warning("optimizer failed at frame %d: %s", frame_id, exc)
                self._declare_lost(frame_id)
                return
            self.pose = se3_exp(xi)
            self.last_report = report
            self._drop_misprojecting(bound_feats)
        elif len(self.map.points) < self.config.min_tracked_features:
            # Map starvation: hold the constant-position prediction and keep
            # queueing frames so the mapping lane can promote points.
            log.debug("frame %d held at prediction (map starved)", frame_id)
        else:
            self._declare_lost(frame_id)
            return

        if keyframe_due(frame_id, len(self.live), self.config):
            self._register_keyframe(frame_id, obs)

        self._push(frame_id, t, obs)
        if self.deterministic:
            self.depth_work_step()
        else:
            while self.queue:
                self.depth_work_step()
        self.trajectory.append((t, self.pose))

    def _declare_lost(self, frame_id: int) -> None:
        self.mode = Mode.LOST
        self.lost_at = frame_id
        log.warning("tracking lost at frame %d", frame_id)

    def _drop_misprojecting(self, bound_feats: list) -> None:
        """Kill bound features far outside the robust band at the new pose.

        A feature whose residual stays several Huber widths out is a tracking
        failure or a bad landmark; carrying it would swamp later fits.
        """
        threshold = max(4.0 * self.config.huber_delta, 6.0)
        for f in bound_feats:
            try:
                e = residual_at_pose(self.pose, Observation(
                    uv=f.uv, point=self.map.points[f.map_point_id]), self.K)
            except GeometryError:
                e = None
            if e is None or float(np.linalg.norm(e)) > threshold:
                self.live.pop(f.feature_id, None)
                self.outlier_drops += 1

    def _register_keyframe(self, frame_id: int, obs: dict) -> None:
        """Record the keyframe pose and give new feature ids fresh filters."""
        self.map.keyframes[frame_id] = self.pose
        self.keyframe_ids.append(frame_id)
        min_d2 = self.config.min_feature_distance ** 2
        existing = [f.uv for f in self.live.values()]
        for fid, uv in sorted(obs.items()):
            if fid in self.live:
                continue
            if any(float(np.sum((uv - q) ** 2)) < min_d2 for q in existing):
                continue
            self.live[fid] = _LiveFeature(
                feature_id=fid, uv=uv, birth_frame=frame_id,
                birth_keyframe_id=frame_id, birth_uv=uv.copy(),
                filter=depth_filter.init_filter(
                    self.filter_d_min, self.filter_d_max, frame_id
                ),
            )
            existing.append(uv)

    def _push(self, frame_id: int, t: float, obs: dict) -> None:
        snapshot = {
            f.feature_id: f.uv.copy()
            for f in self.live.values()
            if f.filter is not None and f.feature_id in obs
        }
        if len(self.queue) >= self.config.queue_capacity:
            dropped = self.queue.popleft()
            self.drops += 1
            log.warning("queue full: dropping pending frame %d", dropped.frame_id)
        self.queue.append(_PendingFrame(frame_id=frame_id, t=t, obs=snapshot, pose=self.pose))
        self.queued += 1

    # -------------------------------------------------------------- mapping

    def depth_work_step(self) -> int:
        """Consume the oldest pending frame; returns filters updated/promoted.

        For each snapshotted feature still alive and unbound, triangulate its
        bearing against the birth keyframe, update the depth filter, and
        promote it to a map point once converged.
        """
        if not self.queue:
            return 0
        pending = self.queue.popleft()
        count = 0
        for fid, uv in pending.obs.items():
            feat = self.live.get(fid)
            if feat is None:
                self.stale_skips += 1
                continue
            if feat.filter is None or (feat.map_point_id is not None and not feat.provisional):
                continue
            birth_pose = self.map.keyframes[feat.filter.keyframe_id]
            rel = pending.pose.compose(birth_pose.inverse())  # birth -> current
            b1 = self.K.bearing(*feat.birth_uv)
            b2 = self.K.bearing(*uv)
            try:
                z1, _, _ = triangulate(b1, b2, rel.R, rel.t)
                # Once the belief is informative, evaluate the one-pixel
                # variance at its mean rather than at the raw measurement:
                # weights at the measured depth correlate with the
                # measurement's own noise and systematically shrink the map
                # scale.  While the belief is still diffuse the measurement
                # is the better linearization point.
                informative = feat.filter.d_var < (0.25 * feat.filter.d_mean) ** 2
                d_eval = feat.filter.d_mean if informative else z1
                tau2 = depth_filter.compute_tau2(rel.inverse(), b1, d_eval, self.K)
            except GeometryError:
                self.measurement_skips += 1
                continue
            if not np.isfinite(tau2) or np.sqrt(tau2) > self.config.depth_measurement_gate * d_eval:
                self.measurement_skips += 1
                continue
            feat.filter = depth_filter.update(feat.filter, DepthMeasurement(z1, tau2))
            count += 1
            if depth_filter.has_converged(feat.filter, self.config.depth_convergence_ratio):
                point_birth = feat.filter.d_mean * b1
                point_world = birth_pose.inverse().apply(point_birth)
                if feat.provisional and feat.map_point_id is not None:
                    # Superseded bootstrap seed: drop the unrefined point.
                    self.map.points.pop(feat.map_point_id, None)
                    feat.provisional = False
                feat.map_point_id = self.map.add_point(point_world)
                feat.filter = None
                self.promotions += 1
        return count

    def drain_queue(self) -> int:
        steps = 0
        while self.queue:
            self.depth_work_step()
            steps += 1
        return steps

    # --------------------------------------------------------------- output

    def trajectory_world(self) -> list[tuple[float, PoseSE3]]:
        """Timestamped camera-to-world poses for trajectory files."""
        return [(t, pose.inverse()) for t, pose in self.trajectory]

    def report(self) -> dict:
        return {
            "mode": self.mode.value,
            "frames": self.frames_processed,
            "bootstrap_frame": self.bootstrap_frame,
            "keyframes": len(self.keyframe_ids),
            "frames_queued": self.queued,
            "map_points": len(self.map.points),
            "promotions": self.promotions,
            "drops": self.drops,
            "stale_skips": self.stale_skips,
            "measurement_skips": self.measurement_skips,
            "outlier_drops": self.outlier_drops,
            "lost_at": self.lost_at,
        }


# ---------------------------------------------------------------- frontends


class EventFrontend:
    """Turns raw event frames into per-frame feature observations.

    Owns the motion-corrected images, the Harris detections on keyframes and
    the patch tracker between consecutive corrected frames; emits the same
    observation maps a track-file replay would.
    """

    def __init__(self, config: Config):
        self.config = config
        self.features: list[Feature] = []
        self.prev_frame: EventFrame | None = None
        self.flow = None
        self.next_fid = 0

    def process(self, frame: EventFrame) -> dict[int, tuple[float, float]]:
        cfg = self.config
        corrected, flow = em_flow_correct(
            frame, cfg.em_window_radius, flow_init=self.flow,
            features=self.features or None,
        )
        frame.corrected = corrected

        if self.prev_frame is not None and self.features:
            dt = frame.t0 - self.prev_frame.t0
            predicted = {
                f.feature_id: flow.velocities.get(f.feature_id, np.zeros(2)) * dt
                for f in self.features
            }
            results = track_features(self.prev_frame, self.features, frame, predicted)
            survivors = []
            for f in self.features:
                new_uv = results.get(f.feature_id)
                if new_uv is not None:
                    f.uv = new_uv
                    f.lifetime += 1
                    survivors.append(f)
            self.features = survivors

        frame.is_keyframe = keyframe_due(frame.id, len(self.features), cfg)
        if frame.is_keyframe:
            new = detect_harris(
                corrected, cfg.max_features - len(self.features),
                cfg.min_feature_distance, frame_id=frame.id,
                start_id=self.next_fid, exclude=[f.uv for f in self.features],
            )
            self.next_fid += len(new)
            self.features.extend(new)

        self.prev_frame = frame
        self.flow = flow
        return {f.feature_id: (float(f.uv[0]), float(f.uv[1])) for f in self.features}


@dataclass
class RunResult:
    trajectory: list[tuple[float, PoseSE3]]  # camera-to-world
    map_points: dict[int, np.ndarray]
    report: dict
    lost: bool
    observations: dict[int, dict[int, tuple[float, float]]]
    frames: list[EventFrame] | None = None


def run_on_tracks(
    config: Config,
    tracks: dict[int, dict[int, tuple[float, float]]],
    deterministic: bool = False,
) -> RunResult:
    """Replay a per-frame feature-track map through the pipeline."""
    pipeline = Pipeline(config, deterministic=deterministic)
    for frame_id in sorted(tracks):
        t = frame_id * config.frame_interval
        pipeline.process_tracked_frame(frame_id, t, tracks[frame_id])
        if pipeline.mode is Mode.LOST:
            break
    pipeline.drain_queue()
    return RunResult(
        trajectory=pipeline.trajectory_world(),
        map_points=dict(pipeline.map.points),
        report=pipeline.report(),
        lost=pipeline.mode is Mode.LOST,
        observations=tracks,
    )


def run_on_events(
    config: Config, events: list[Event], deterministic: bool = False
) -> RunResult:
    """Build frames from a raw event stream and run the full pipeline."""
    from .frames import build_event_frames

    frames = build_event_frames(events, config)
    frontend = EventFrontend(config)
    pipeline = Pipeline(config, deterministic=deterministic)
    observations: dict[int, dict[int, tuple[float, float]]] = {}
    for frame in frames:
        obs = frontend.process(frame)
        observations[frame.id] = obs
        pipeline.process_tracked_frame(frame.id, frame.t0, obs)
        if pipeline.mode is Mode.LOST:
            break
    pipeline.drain_queue()
    return RunResult(
        trajectory=pipeline.trajectory_world(),
        map_points=dict(pipeline.map.points),
        report=pipeline.report(),
        lost=pipeline.mode is Mode.LOST,
        observations=observations,
        frames=frames,
    )
