"""Frame accumulation, EM flow correction, Harris detection, patch tracking."""

import numpy as np
import pytest

from eventvo.frames import (
    GLOBAL_WINDOW,
    Feature,
    accumulate_frame,
    align_patch,
    build_event_frames,
    compute_lifetime_stats,
    detect_harris,
    em_flow_correct,
    estimate_window_flow,
    harris_response,
    image_spatial_variance,
    track_features,
)
from eventvo.io import Config, Event

from oracles import brute_force_harris, top_k_pixels


def make_edge_events(
    v=50.0, t_start=0.0, t_end=0.1, n_edges=4, spacing=12.0, x_start=10.3,
    rows=range(8, 25), width=64,
):
    """Clean vertical edges translating at ``v`` px/s.

    One event per integer-column crossing per row, so every event position
    lies exactly on its edge's motion path.
    """
    recs = []
    for j in range(n_edges):
        x0 = x_start + j * spacing
        c_lo = int(np.ceil(x0 + v * t_start))
        c_hi = int(np.floor(x0 + v * t_end))
        for c in range(c_lo, c_hi + 1):
            t = (c - x0) / v
            if t_start <= t < t_end and 0 <= c < width:
                for y in rows:
                    recs.append((t, c, y, 1))
    recs.sort()
    return [Event(t=t, x=x, y=y, p=p) for t, x, y, p in recs]


def make_noise_events(n=400, duration=0.03, size=128, seed=9):
    rng = np.random.default_rng(seed)
    ts = np.sort(rng.uniform(0, duration, n))
    return [
        Event(t=float(t), x=int(rng.integers(0, size)), y=int(rng.integers(0, size)), p=1)
        for t in ts
    ]


class TestAccumulateFrame:
    def test_empty_events(self):
        frame = accumulate_frame([], 0.0, 0.03, 0, shape=(16, 16))
        assert frame.accum.sum() == 0
        assert frame.events == ()

    def test_counting_same_pixel(self):
        events = [Event(t=0.001 * k, x=5, y=7, p=1) for k in range(3)]
        frame = accumulate_frame(events, 0.0, 0.03, 0, shape=(16, 16))
        assert frame.accum[7, 5] == 3

    def test_half_open_interval(self):
        events = [Event(t=0.0, x=1, y=1, p=1), Event(t=0.03, x=2, y=2, p=-1)]
        frame = accumulate_frame(events, 0.0, 0.03, 0, shape=(16, 16))
        assert frame.accum[1, 1] == 1
        assert frame.accum[2, 2] == 0

    def test_polarity_ignored(self):
        events = [Event(t=0.001, x=5, y=7, p=1), Event(t=0.002, x=5, y=7, p=-1)]
        frame = accumulate_frame(events, 0.0, 0.03, 0, shape=(16, 16))
        assert frame.accum[5, 5] == 0
        assert frame.accum[7, 5] == 2


class TestBuildEventFrames:
    def test_partitioning_reproduces_stream(self):
        rng = np.random.default_rng(17)
        events = [
            Event(t=float(t), x=int(rng.integers(0, 32)), y=int(rng.integers(0, 24)), p=1)
            for t in np.sort(rng.uniform(0, 0.5, 300))
        ]
        config = Config(width=32, height=24, fx=10, fy=10, cx=16, cy=12, frame_interval=0.03)
        frames = build_event_frames(events, config)
        rebuilt = [e for f in frames for e in f.events]
        assert rebuilt == events
        for f in frames:
            assert all(f.t0 <= e.t < f.t1 for e in f.events)
            assert f.accum.shape == (24, 32)


class TestEMFlow:
    def test_recovers_edge_velocity(self):
        events = make_edge_events()
        frame = accumulate_frame(events, 0.0, 0.1, 0, shape=(48, 64))
        corrected, flow = em_flow_correct(frame, window_radius=10)
        v = flow.velocities[GLOBAL_WINDOW]
        assert flow.reliable[GLOBAL_WINDOW]
        assert abs(v[0] - 50.0) * 0.1 < 0.1  # px/frame error
        assert abs(v[1]) * 0.1 < 0.1

    def test_correction_sharpens_image(self):
        events = make_edge_events()
        frame = accumulate_frame(events, 0.0, 0.1, 0, shape=(48, 64))
        corrected, _ = em_flow_correct(frame, window_radius=10)
        assert image_spatial_variance(corrected) < image_spatial_variance(frame.accum)

    def test_never_worse_than_zero_flow_on_constant_flow(self):
        for speed in (25.0, 50.0, 80.0):
            events = make_edge_events(v=speed)
            frame = accumulate_frame(events, 0.0, 0.1, 0, shape=(48, 64))
            corrected, _ = em_flow_correct(frame, window_radius=10)
            # Zero-flow propagation of integer positions is the raw count image.
            assert image_spatial_variance(corrected) <= image_spatial_variance(frame.accum) + 1e-12

    def test_single_timestamp_leaves_accum_unchanged(self):
        events = [Event(t=0.0, x=x, y=10, p=1) for x in range(5, 15)]
        frame = accumulate_frame(events, 0.0, 0.03, 0, shape=(32, 32))
        corrected, flow = em_flow_correct(frame, window_radius=8)
        assert np.allclose(corrected, frame.accum)

    def test_uniform_noise_small_flow(self):
        events = make_noise_events()
        frame = accumulate_frame(events, 0.0, 0.03, 0, shape=(128, 128))
        _, flow = em_flow_correct(frame, window_radius=10)
        v = flow.velocities[GLOBAL_WINDOW]
        assert np.linalg.norm(v) * 0.03 < 1.0  # px/frame

    def test_too_few_events_unreliable(self):
        v, ok = estimate_window_flow(
            np.array([0.0, 0.01]), np.array([1.0, 2.0]), np.array([1.0, 1.0]), 0.0
        )
        assert not ok
        assert np.allclose(v, 0.0)

    def test_history_extends_window(self):
        all_events = make_edge_events(t_start=-0.08, t_end=0.02)
        frame_events = [e for e in all_events if e.t >= 0.0]
        history = [e for e in all_events if e.t < 0.0]
        frame = accumulate_frame(frame_events, 0.0, 0.02, 0, shape=(48, 64))
        _, flow = em_flow_correct(frame, window_radius=10, history=history)
        v = flow.velocities[GLOBAL_WINDOW]
        assert abs(v[0] - 50.0) * 0.02 < 0.1


class TestHarris:
    def test_uniform_image_no_features(self):
        assert detect_harris(np.full((32, 32), 7.0), 10, 5) == []

    def test_l_shape_single_corner(self):
        img = np.zeros((32, 32))
        img[8:21, 10:12] = 4.0
        img[19:21, 10:23] = 4.0
        feats = detect_harris(img, max_features=1, min_distance=5)
        assert len(feats) == 1
        # The strongest response must agree with the brute-force argmax and
        # sit at the arms' junction.
        (by, bx) = top_k_pixels(brute_force_harris(img), 1, border=4)[0]
        assert np.allclose(feats[0].uv, [bx, by])
        assert abs(feats[0].uv[0] - 11.0) <= 2.0
        assert abs(feats[0].uv[1] - 19.0) <= 2.0

    def test_nms_keeps_stronger_of_close_pair(self):
        img = np.zeros((32, 32))
        img[10:12, 10:12] = 5.0   # strong blob
        img[10:12, 13:15] = 2.5   # weaker blob 3 px away
        weak_center = np.array([13.5, 10.5])
        loose = detect_harris(img, max_features=10, min_distance=2)
        strict = detect_harris(img, max_features=10, min_distance=5)
        assert any(np.linalg.norm(f.uv - weak_center) < 1.5 for f in loose)
        assert not any(np.linalg.norm(f.uv - weak_center) < 1.5 for f in strict)
        assert np.linalg.norm(strict[0].uv - np.array([10.5, 10.5])) < 1.5

    def test_ranking_matches_brute_force(self):
        rng = np.random.default_rng(23)
        img = np.zeros((32, 32))
        for _ in range(6):
            cy, cx = rng.integers(6, 26, 2)
            img[cy : cy + 2, cx : cx + 2] += rng.uniform(1, 5)
        fast = harris_response(img)
        slow = brute_force_harris(img)
        assert np.allclose(fast, slow, atol=1e-9 * max(1.0, np.abs(slow).max()))
        assert top_k_pixels(fast, 5, border=4) == top_k_pixels(slow, 5, border=4)

    def test_deterministic_order(self):
        rng = np.random.default_rng(29)
        img = rng.uniform(0, 3, (48, 48))
        a = detect_harris(img, 8, 5)
        b = detect_harris(img, 8, 5)
        assert [tuple(f.uv) for f in a] == [tuple(f.uv) for f in b]


def _textured_image(rng, shape=(64, 64)):
    img = np.zeros(shape)
    for _ in range(25):
        cy, cx = rng.integers(4, shape[0] - 6), rng.integers(4, shape[1] - 6)
        img[cy : cy + 2, cx : cx + 2] += rng.uniform(1, 4)
    return img


class TestTrackFeatures:
    def _frame(self, img, frame_id=0):
        return type(
            "F", (), {"image": lambda self: img, "corrected": img, "accum": img}
        )()

    def test_identity(self):
        rng = np.random.default_rng(31)
        img = _textured_image(rng)
        from eventvo.frames import EventFrame

        prev = EventFrame(0, 0.0, 0.03, (), img, corrected=img)
        cur = EventFrame(1, 0.03, 0.06, (), img, corrected=img)
        feats = [Feature(feature_id=i, uv=np.array([20.0 + 6 * i, 25.0]), birth_frame=0) for i in range(4)]
        results = track_features(prev, feats, cur)
        for f in feats:
            assert results[f.feature_id] is not None
            assert np.linalg.norm(results[f.feature_id] - f.uv) < 1e-6

    def test_integer_shift_equivariance(self):
        rng = np.random.default_rng(37)
        img = _textured_image(rng)
        shifted = np.zeros_like(img)
        dx, dy = 2, -1
        shifted[: img.shape[0] + dy, dx:] = img[-dy :, : img.shape[1] - dx]
        from eventvo.frames import EventFrame

        prev = EventFrame(0, 0.0, 0.03, (), img, corrected=img)
        cur = EventFrame(1, 0.03, 0.06, (), shifted, corrected=shifted)
        feats = [
            f for f in detect_harris(img, max_features=6, min_distance=6)
            if 12 <= f.uv[0] <= 50 and 12 <= f.uv[1] <= 50
        ]
        assert len(feats) >= 3
        results = track_features(prev, feats, cur)
        tracked = 0
        for f in feats:
            new_uv = results[f.feature_id]
            if new_uv is None:
                continue
            tracked += 1
            assert abs(new_uv[0] - (f.uv[0] + dx)) < 0.2
            assert abs(new_uv[1] - (f.uv[1] + dy)) < 0.2
        assert tracked >= 3

    def test_out_of_bounds_lost(self):
        rng = np.random.default_rng(41)
        img = _textured_image(rng)
        from eventvo.frames import EventFrame

        prev = EventFrame(0, 0.0, 0.03, (), img, corrected=img)
        cur = EventFrame(1, 0.03, 0.06, (), img, corrected=img)
        feats = [Feature(feature_id=0, uv=np.array([2.0, 30.0]), birth_frame=0)]
        results = track_features(prev, feats, cur, predicted_shift={0: np.array([-5.0, 0.0])})
        assert results[0] is None

    def test_flat_patch_lost(self):
        from eventvo.frames import EventFrame

        img = np.zeros((64, 64))
        img[40:44, 40:44] = 3.0
        prev = EventFrame(0, 0.0, 0.03, (), img, corrected=img)
        cur = EventFrame(1, 0.03, 0.06, (), img, corrected=img)
        feats = [Feature(feature_id=0, uv=np.array([15.0, 15.0]), birth_frame=0)]
        assert track_features(prev, feats, cur)[0] is None


class TestLifetimeStats:
    def test_hand_oracle(self):
        tracks = {}
        # Lifetimes 3, 5, 10 built from consecutive runs.
        for fid, lifetime in ((0, 3), (1, 5), (2, 10)):
            for k in range(lifetime):
                tracks.setdefault(k, {})[fid] = (1.0 * fid, 2.0)
        stats = compute_lifetime_stats(tracks, min_lifetime=3)
        assert stats.mean == pytest.approx(6.0)
        assert stats.std == pytest.approx(np.sqrt(26.0 / 3.0), abs=1e-4)
        assert stats.std == pytest.approx(2.9439, abs=1e-4)
        assert stats.histogram == {3: 1, 5: 1, 10: 1}

    def test_filtering_below_min(self):
        tracks = {0: {0: (1, 1), 1: (2, 2)}, 1: {0: (1, 1), 1: (2, 2)}}
        stats = compute_lifetime_stats(tracks, min_lifetime=3)
        assert stats.empty
        assert stats.count == 0

    def test_gap_ends_first_run(self):
        tracks = {0: {0: (1, 1)}, 1: {0: (1, 1)}, 3: {0: (1, 1)}}
        stats = compute_lifetime_stats(tracks, min_lifetime=1)
        assert stats.mean == pytest.approx(2.0)

    def test_summary_layout(self):
        tracks = {k: {0: (1, 1)} for k in range(5)}
        lines = compute_lifetime_stats(tracks, 1).summary_lines()
        assert any("Average lifetime" in line for line in lines)
        assert any("Standard variance" in line for line in lines)
