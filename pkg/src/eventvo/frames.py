"""Event-frame construction, motion correction, corner detection and tracking.

Events are aggregated over a fixed interval into a per-pixel count image.
Within each feature's spatiotemporal window an expectation-maximization loop
alternates soft event-to-event association with a closed-form constant
velocity estimate; events are then propagated back to the interval start
before accumulation, which sharpens the image.  Corners are detected on the
corrected image of keyframes and followed between consecutive corrected
frames by inverse-compositional affine patch alignment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .io import Config, Event, events_to_arrays

GLOBAL_WINDOW = -1

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T
_HARRIS_K = 0.04
_GAUSS_SIGMA = 1.0
_GAUSS_RADIUS = 4
_HARRIS_BORDER = 4


@dataclass
class EventFrame:
    """Events of one time interval plus their per-pixel count image."""

    id: int
    t0: float
    t1: float
    events: tuple
    accum: np.ndarray
    is_keyframe: bool = False
    corrected: np.ndarray | None = None

    def image(self) -> np.ndarray:
        return self.corrected if self.corrected is not None else self.accum


@dataclass
class Feature:
    """A tracked corner; ``map_point_id`` is set once its depth converges."""

    feature_id: int
    uv: np.ndarray
    birth_frame: int
    lifetime: int = 1
    map_point_id: int | None = None


@dataclass
class FlowEstimate:
    """Per-feature image velocity in pixels/second."""

    velocities: dict[int, np.ndarray] = field(default_factory=dict)
    reliable: dict[int, bool] = field(default_factory=dict)


def accumulate_frame(
    events, t0: float, dt: float, frame_id: int, shape: tuple[int, int]
) -> EventFrame:
    """Collect the events with t0 <= t < t0+dt into a frame.

    ``events`` must be time-sorted; ``shape`` is (height, width); polarity is
    ignored for counting.
    """
    if dt <= 0:
        raise ValidationError("frame interval must be positive")
    times = np.array([e.t for e in events])
    lo = int(np.searchsorted(times, t0, side="left")) if len(times) else 0
    hi = int(np.searchsorted(times, t0 + dt, side="left")) if len(times) else 0
    selected = tuple(events[lo:hi])
    accum = np.zeros(shape)
    for e in selected:
        accum[e.y, e.x] += 1.0
    return EventFrame(
        id=frame_id, t0=t0, t1=t0 + dt, events=selected, accum=accum, is_keyframe=False
    )


def build_event_frames(events: list[Event], config: Config) -> list[EventFrame]:
    """Partition a time-sorted stream into consecutive frames.

    Frames cover half-open intervals of ``config.frame_interval`` starting at
    the first event's timestamp; a trailing partial interval is included, so
    concatenating the frames' events reproduces the stream.
    """
    shape = (config.height, config.width)
    if not events:
        return []
    t_first = events[0].t
    t_last = events[-1].t
    dt = config.frame_interval
    n_frames = int(math.floor((t_last - t_first) / dt)) + 1
    times = np.array([e.t for e in events])
    frames = []
    for k in range(n_frames):
        t0 = t_first + k * dt
        lo = int(np.searchsorted(times, t0, side="left"))
        hi = int(np.searchsorted(times, t0 + dt, side="left"))
        chunk = tuple(events[lo:hi])
        accum = np.zeros(shape)
        for e in chunk:
            accum[e.y, e.x] += 1.0
        frames.append(EventFrame(id=k, t0=t0, t1=t0 + dt, events=chunk, accum=accum))
    return frames


def image_spatial_variance(image: np.ndarray) -> float:
    """Trace of the intensity-weighted position covariance of an image."""
    total = image.sum()
    if total <= 0:
        return 0.0
    ys, xs = np.indices(image.shape)
    w = image / total
    mx = float((w * xs).sum())
    my = float((w * ys).sum())
    return float((w * ((xs - mx) ** 2 + (ys - my) ** 2)).sum())


def estimate_window_flow(
    t: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    t0: float,
    v_init: np.ndarray | None = None,
    sigma: float = 2.0,
    tol: float = 1e-3,
    max_iters: int = 50,
    max_events: int = 500,
) -> tuple[np.ndarray, bool]:
    """EM estimate of a constant 2D velocity aligning the window's events.

    The E-step softly associates event pairs by the distance of their
    propagated positions; the M-step solves the weighted least-squares
    velocity in closed form.  Returns ``(velocity, reliable)``; windows with
    fewer than 5 events are flagged unreliable and get zero flow.
    """
    v = np.zeros(2) if v_init is None else np.asarray(v_init, dtype=float).copy()
    if len(t) < 5:
        return np.zeros(2), False
    if len(t) > max_events:
        idx = np.linspace(0, len(t) - 1, max_events).astype(int)
        t, x, y = t[idx], x[idx], y[idx]

    tau = np.asarray(t, dtype=float) - t0
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    dx = x[:, None] - x[None, :]
    dy = y[:, None] - y[None, :]
    dtau = tau[:, None] - tau[None, :]
    dtau2 = dtau * dtau

    def correlation(vel):
        rx = dx - vel[0] * dtau
        ry = dy - vel[1] * dtau
        return np.exp(-(rx * rx + ry * ry) / (2.0 * sigma * sigma))

    for _ in range(max_iters):
        # E-step: soft pairwise association by propagated-position distance.
        r = correlation(v)
        denom = float((r * dtau2).sum())
        if denom < 1e-12:
            # All associated events share one timestamp; flow is irrelevant.
            return v, False
        # M-step: closed-form minimizer of sum r_ij |dx_ij - v dtau_ij|^2.
        v_new = np.array(
            [float((r * dtau * dx).sum()), float((r * dtau * dy).sum())]
        ) / denom
        if np.linalg.norm(v_new - v) < tol:
            v = v_new
            break
        v = v_new

    # Support gate: without a clear alignment improvement over zero flow the
    # estimate is chance structure (noise or a static scene); use zero flow.
    n = len(tau)
    gain = (correlation(v).sum() - n) / max(correlation(np.zeros(2)).sum() - n, 1e-12)
    if gain < 1.15:
        return np.zeros(2), False
    return v, True


def em_flow_correct(
    frame: EventFrame,
    window_radius: float,
    flow_init: FlowEstimate | None = None,
    features: list[Feature] | None = None,
    history: list[Event] | None = None,
) -> tuple[np.ndarray, FlowEstimate]:
    """Motion-correct a frame's events to its start time.

    Each feature defines a spatiotemporal window (spatial radius
    ``window_radius``; temporally the frame's interval extended backwards by
    the optional ``history`` events from recent frames, which sharpen the
    velocity estimate but are never accumulated).  Per window an EM flow is
    estimated, then every frame event in the window is displaced by
    ``-v (t - t0)`` and splatted bilinearly into the corrected image.
    Without features a single window covering the whole frame is used (id
    ``GLOBAL_WINDOW``).  Events outside all windows accumulate uncorrected.
    """
    if window_radius < 1:
        raise ValidationError("window radius must be at least 1 pixel")
    shape = frame.accum.shape
    t, x, y, _ = events_to_arrays(list(frame.events))
    if history:
        th, xh, yh, _ = events_to_arrays(list(history))
        t_all = np.concatenate([th, t])
        x_all = np.concatenate([xh, x])
        y_all = np.concatenate([yh, y])
    else:
        t_all, x_all, y_all = t, x, y
    corrected = np.zeros(shape)
    flow = FlowEstimate()

    if not features:
        centers = {GLOBAL_WINDOW: np.array([shape[1] / 2.0, shape[0] / 2.0])}
        radius = float(max(shape))
    else:
        centers = {f.feature_id: np.asarray(f.uv, dtype=float) for f in features}
        radius = float(window_radius)

    ids = sorted(centers)
    if len(t_all) == 0:
        for fid in ids:
            flow.velocities[fid] = np.zeros(2)
            flow.reliable[fid] = False
        return corrected, flow

    def nearest_window(xs, ys):
        assign = np.full(len(xs), -2, dtype=int)  # -2: no window
        best_d2 = np.full(len(xs), np.inf)
        for idx, fid in enumerate(ids):
            c = centers[fid]
            d2 = (xs - c[0]) ** 2 + (ys - c[1]) ** 2
            inside = d2 <= radius * radius
            better = inside & (d2 < best_d2)
            assign[better] = idx
            best_d2[better] = d2[better]
        return assign

    assign_all = nearest_window(x_all, y_all)
    assign_frame = nearest_window(x, y)

    for idx, fid in enumerate(ids):
        v0 = None
        if flow_init is not None:
            v0 = flow_init.velocities.get(fid)
        sel = assign_all == idx
        v, ok = estimate_window_flow(
            t_all[sel], x_all[sel], y_all[sel], frame.t0, v_init=v0
        )
        if not ok:
            v = np.zeros(2)
        flow.velocities[fid] = v
        flow.reliable[fid] = ok
        in_frame = assign_frame == idx
        dt_ev = t[in_frame] - frame.t0
        _splat(corrected, x[in_frame] - v[0] * dt_ev, y[in_frame] - v[1] * dt_ev)

    outside = assign_frame == -2
    _splat(corrected, x[outside].astype(float), y[outside].astype(float))
    return corrected, flow


def _splat(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> None:
    """Bilinearly accumulate unit mass at subpixel positions (in place)."""
    h, w = image.shape
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    fx = xs - x0
    fy = ys - y0
    for ox, oy, wgt in (
        (0, 0, (1 - fx) * (1 - fy)),
        (1, 0, fx * (1 - fy)),
        (0, 1, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        xi = x0 + ox
        yi = y0 + oy
        ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        np.add.at(image, (yi[ok], xi[ok]), wgt[ok])


def gaussian_window_kernel(sigma: float = _GAUSS_SIGMA, radius: int = _GAUSS_RADIUS) -> np.ndarray:
    """Normalized 2D Gaussian window used to smooth the structure tensor."""
    i = np.arange(-radius, radius + 1, dtype=float)
    w = np.exp(-(i * i) / (2.0 * sigma * sigma))
    w /= w.sum()
    return np.outer(w, w)


def harris_response(image: np.ndarray) -> np.ndarray:
    """Harris corner response with 3x3 Sobel gradients and k = 0.04."""
    image = np.asarray(image, dtype=float)
    gx = ndimage.correlate(image, _SOBEL_X, mode="reflect")
    gy = ndimage.correlate(image, _SOBEL_Y, mode="reflect")
    window = gaussian_window_kernel()
    a = ndimage.correlate(gx * gx, window, mode="reflect")
    b = ndimage.correlate(gx * gy, window, mode="reflect")
    c = ndimage.correlate(gy * gy, window, mode="reflect")
    return (a * c - b * b) - _HARRIS_K * (a + c) ** 2


def detect_harris(
    image: np.ndarray,
    max_features: int,
    min_distance: float,
    frame_id: int = 0,
    start_id: int = 0,
    exclude: list[np.ndarray] | None = None,
) -> list[Feature]:
    """Detect up to ``max_features`` corners with non-maximum suppression.

    Candidates are ranked by descending response (row-major on ties) and
    greedily accepted if no stronger detection or ``exclude`` position lies
    within ``min_distance``.  A ``_HARRIS_BORDER``-pixel margin, where the
    filter support is incomplete, is ignored.
    """
    response = harris_response(image)
    peak = response.max()
    if peak <= 0:
        return []
    h, w = response.shape
    mask = response > max(1e-6 * peak, 0.0)
    mask[:_HARRIS_BORDER, :] = False
    mask[-_HARRIS_BORDER:, :] = False
    mask[:, :_HARRIS_BORDER] = False
    mask[:, -_HARRIS_BORDER:] = False
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return []
    order = np.lexsort((xs, ys, -response[ys, xs]))

    taken: list[np.ndarray] = [np.asarray(p, dtype=float) for p in (exclude or [])]
    out: list[Feature] = []
    min_d2 = min_distance * min_distance
    for i in order:
        p = np.array([float(xs[i]), float(ys[i])])
        if any(float(np.sum((p - q) ** 2)) < min_d2 for q in taken):
            continue
        out.append(Feature(feature_id=start_id + len(out), uv=p, birth_frame=frame_id))
        taken.append(p)
        if len(out) >= max_features:
            break
    return out


def _bilinear(image: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    """Sample an image at subpixel positions; None if any falls outside."""
    h, w = image.shape
    if (xs < 0).any() or (ys < 0).any() or (xs > w - 1.001).any() or (ys > h - 1.001).any():
        return None
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    return (
        image[y0, x0] * (1 - fx) * (1 - fy)
        + image[y0, x1] * fx * (1 - fy)
        + image[y1, x0] * (1 - fx) * fy
        + image[y1, x1] * fx * fy
    )


def align_patch(
    template_img: np.ndarray,
    target_img: np.ndarray,
    uv: np.ndarray,
    shift_init: np.ndarray | None = None,
    patch_half: int = 7,
    max_iters: int = 30,
    loss_ratio: float = 0.8,
):
    """Inverse-compositional affine alignment of one patch.

    Returns the feature's position in ``target_img`` or None if the patch
    leaves the image, the system is degenerate, or the final mean absolute
    residual exceeds ``loss_ratio`` times the template's mean absolute value.
    """
    gx, gy = np.meshgrid(
        np.arange(-patch_half, patch_half + 1, dtype=float),
        np.arange(-patch_half, patch_half + 1, dtype=float),
    )
    px = gx.ravel()
    py = gy.ravel()

    template = _bilinear(template_img, uv[0] + px, uv[1] + py)
    if template is None:
        return None
    energy = float(np.abs(template).mean())
    if energy <= 1e-12:
        return None

    tgx = _bilinear(template_img, uv[0] + px + 0.5, uv[1] + py)
    tgx_m = _bilinear(template_img, uv[0] + px - 0.5, uv[1] + py)
    tgy = _bilinear(template_img, uv[0] + px, uv[1] + py + 0.5)
    tgy_m = _bilinear(template_img, uv[0] + px, uv[1] + py - 0.5)
    if tgx is None or tgx_m is None or tgy is None or tgy_m is None:
        return None
    dtx = tgx - tgx_m
    dty = tgy - tgy_m

    sd = np.column_stack([dtx * px, dty * px, dtx * py, dty * py, dtx, dty])
    H = sd.T @ sd
    if np.linalg.cond(H) > 1e10:
        return None
    H_inv = np.linalg.inv(H)

    # Warp as a 3x3 affine acting on patch coordinates.
    A = np.eye(3)
    if shift_init is not None:
        A[0, 2], A[1, 2] = float(shift_init[0]), float(shift_init[1])

    residual = None
    for _ in range(max_iters):
        wx = A[0, 0] * px + A[0, 1] * py + A[0, 2]
        wy = A[1, 0] * px + A[1, 1] * py + A[1, 2]
        sampled = _bilinear(target_img, uv[0] + wx, uv[1] + wy)
        if sampled is None:
            return None
        residual = sampled - template
        dp = H_inv @ (sd.T @ residual)
        delta = np.array(
            [[1.0 + dp[0], dp[2], dp[4]], [dp[1], 1.0 + dp[3], dp[5]], [0.0, 0.0, 1.0]]
        )
        try:
            A = A @ np.linalg.inv(delta)
        except np.linalg.LinAlgError:
            return None
        if np.linalg.norm(dp) < 1e-3:
            break

    if residual is None or float(np.abs(residual).mean()) > loss_ratio * energy:
        return None
    new_uv = np.array([uv[0] + A[0, 2], uv[1] + A[1, 2]])
    h, w = target_img.shape
    if not (0 <= new_uv[0] < w and 0 <= new_uv[1] < h):
        return None
    return new_uv


def track_features(
    prev_frame: EventFrame,
    features: list[Feature],
    cur_frame: EventFrame,
    predicted_shift: dict[int, np.ndarray] | None = None,
    patch_half: int = 7,
    max_iters: int = 30,
    loss_ratio: float = 0.8,
) -> dict[int, np.ndarray | None]:
    """Track each feature from the previous to the current corrected frame.

    Returns new positions keyed by feature id, with None for lost features.
    Loss is a normal outcome; callers drop lost features and increment the
    lifetime of survivors.
    """
    prev_img = prev_frame.image()
    cur_img = cur_frame.image()
    results: dict[int, np.ndarray | None] = {}
    for feat in features:
        shift = None if predicted_shift is None else predicted_shift.get(feat.feature_id)
        results[feat.feature_id] = align_patch(
            prev_img, cur_img, np.asarray(feat.uv, dtype=float),
            shift_init=shift, patch_half=patch_half,
            max_iters=max_iters, loss_ratio=loss_ratio,
        )
    return results


@dataclass
class LifetimeStats:
    """Summary of feature lifetimes; ``empty`` is set when all are filtered."""

    mean: float
    std: float
    histogram: dict[int, int]
    count: int
    empty: bool

    def summary_lines(self) -> list[str]:
        if self.empty:
            return ["Item                Value", "Average lifetime    n/a (no surviving features)"]
        return [
            "Item                Value",
            f"Average lifetime    {self.mean:.3f} frames",
            f"Standard variance   {self.std:.3f} frames",
        ]


def feature_lifetimes(tracks: dict[int, dict[int, tuple[float, float]]]) -> dict[int, int]:
    """Length of each feature's first consecutive run of frames."""
    seen: dict[int, list[int]] = {}
    for frame_id in sorted(tracks):
        for fid in tracks[frame_id]:
            seen.setdefault(fid, []).append(frame_id)
    lifetimes = {}
    for fid, frame_ids in seen.items():
        run = 1
        for prev, cur in zip(frame_ids, frame_ids[1:]):
            if cur == prev + 1:
                run += 1
            else:
                break
        lifetimes[fid] = run
    return lifetimes


def compute_lifetime_stats(
    tracks: dict[int, dict[int, tuple[float, float]]], min_lifetime: int
) -> LifetimeStats:
    """Mean, population standard deviation and histogram of lifetimes.

    Features with lifetime below ``min_lifetime`` are excluded.
    """
    values = [lt for lt in feature_lifetimes(tracks).values() if lt >= min_lifetime]
    if not values:
        return LifetimeStats(float("nan"), float("nan"), {}, 0, True)
    arr = np.array(values, dtype=float)
    hist: dict[int, int] = {}
    for lt in values:
        hist[lt] = hist.get(lt, 0) + 1
    return LifetimeStats(
        mean=float(arr.mean()),
        std=float(arr.std()),  # population: divide by n
        histogram=dict(sorted(hist.items())),
        count=len(values),
        empty=False,
    )
