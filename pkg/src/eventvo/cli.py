"""Command-line entry point for batch odometry runs.

Subcommands: ``run`` (events or track replay), ``synth`` (scene generation),
``eval`` (trajectory error report with figures) and ``track-stats`` (feature
lifetime statistics).  Exit codes are the machine contract: 0 success,
1 input/config error, 2 tracking lost.  Every subcommand writes only inside
its ``--out`` directory.  Set ``EVO_LOG`` to a logging level name for
verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluate, io, plots, synth
from .errors import EventVOError
from .frames import compute_lifetime_stats
from .pipeline import run_on_events, run_on_tracks

EXIT_OK = 0
EXIT_INPUT_ERROR = 1
EXIT_TRACKING_LOST = 2

log = logging.getLogger("eventvo.cli")


def _configure_logging() -> None:
    level_name = os.environ.get("EVO_LOG", "WARNING").upper()
    level = getattr(logging, level_name, logging.WARNING)
    logging.basicConfig(level=level, format="%(name)s %(levelname)s: %(message)s")


def _out_dir(value: str) -> Path:
    out = Path(value)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_run(args) -> int:
    """Run the odometry pipeline and write trajectory, map and run report."""
    if bool(args.events) == bool(args.tracks):
        print("error: exactly one of --events / --tracks is required", file=sys.stderr)
        return EXIT_INPUT_ERROR
    out = _out_dir(args.out)
    config = io.load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.keyframe_period is not None:
        config.keyframe_period = args.keyframe_period
    if args.frame_interval is not None:
        config.frame_interval = args.frame_interval

    if args.tracks:
        tracks = io.load_feature_tracks(args.tracks, config.width, config.height)
        result = run_on_tracks(config, tracks, deterministic=args.deterministic)
    else:
        events = io.load_event_stream(args.events, config)
        result = run_on_events(config, events, deterministic=args.deterministic)

    io.write_trajectory(out / "trajectory.txt", result.trajectory)
    io.write_map_points(out / "map_points.txt", result.map_points)
    (out / "run_report.json").write_text(json.dumps(result.report, indent=2) + "\n")
    if args.dump_debug and result.frames is not None:
        dump = out / "debug"
        dump.mkdir(exist_ok=True)
        for frame in result.frames:
            io.write_pgm(dump / f"frame_{frame.id:05d}.pgm", frame.image())
        io.write_feature_tracks(dump / "tracks.txt", result.observations)

    for key, value in result.report.items():
        print(f"{key}: {value}")
    if result.lost:
        print(f"tracking lost at frame {result.report['lost_at']}", file=sys.stderr)
        return EXIT_TRACKING_LOST
    return EXIT_OK


def cmd_synth(args) -> int:
    """Generate a synthetic scene: tracks, ground truth, config, events."""
    out = _out_dir(args.out)
    spec = synth.load_scene_spec(args.spec) if args.spec else synth.SceneSpec()
    if args.seed is not None:
        spec.seed = args.seed
    scene = synth.generate_scene(spec)
    paths = synth.write_scene(scene, out)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    """Align an estimate to ground truth and write the error report."""
    out = _out_dir(args.out)
    estimate = io.load_trajectory(args.estimate)
    ground_truth = io.load_trajectory(args.ground_truth)
    alignment = evaluate.align_trajectories(estimate, ground_truth, mode=args.mode)
    report = evaluate.compute_position_errors(estimate, ground_truth, alignment)

    io.write_csv(
        out / "errors.csv",
        ("t", "longitudinal", "lateral", "planar"),
        report.rows(),
    )
    summary = "\n".join(report.summary_lines()) + "\n"
    (out / "summary.txt").write_text(summary)
    print(summary, end="")

    plots.save_error_timeline(report, out / "error_timeline.png")
    est_xy = alignment.apply(np.array([p.t for _, p in estimate]))[:, :2]
    gt_xy = np.array([p.t for _, p in ground_truth])[:, :2]
    plots.save_trajectory_topdown(est_xy, gt_xy, out / "trajectory_topdown.png")
    return EXIT_OK


def cmd_track_stats(args) -> int:
    """Lifetime statistics of a feature-track file."""
    out = _out_dir(args.out)
    tracks = io.load_feature_tracks(args.tracks)
    stats = compute_lifetime_stats(tracks, args.min_lifetime)
    summary = "\n".join(stats.summary_lines()) + "\n"
    print(summary, end="")
    (out / "lifetime_summary.txt").write_text(summary)
    io.write_csv(
        out / "lifetime_histogram.csv",
        ("lifetime", "count"),
        sorted(stats.histogram.items()),
    )
    plots.save_lifetime_histogram(stats.histogram, out / "lifetime_histogram.png")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eventvo", description="Event-camera visual odometry toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the odometry pipeline")
    run.add_argument("--config", required=True)
    run.add_argument("--events", help="raw event stream file (t x y p)")
    run.add_argument("--tracks", help="precomputed feature-track file to replay")
    run.add_argument("--out", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--deterministic", action="store_true",
                     help="single-lane mode: one depth step per tracked frame")
    run.add_argument("--keyframe-period", type=int, dest="keyframe_period")
    run.add_argument("--frame-interval", type=float, dest="frame_interval")
    run.add_argument("--dump-debug", action="store_true",
                     help="dump corrected frames as PGM plus per-frame tracks")
    run.set_defaults(func=cmd_run)

    sy = sub.add_parser("synth", help="generate a synthetic scene")
    sy.add_argument("--spec", help="scene spec file (key = value)")
    sy.add_argument("--out", required=True)
    sy.add_argument("--seed", type=int)
    sy.set_defaults(func=cmd_synth)

    ev = sub.add_parser("eval", help="evaluate a trajectory against ground truth")
    ev.add_argument("--estimate", required=True)
    ev.add_argument("--ground-truth", required=True, dest="ground_truth")
    ev.add_argument("--mode", choices=("rigid", "rigid+scale"), default="rigid+scale")
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=cmd_eval)

    ts = sub.add_parser("track-stats", help="feature lifetime statistics")
    ts.add_argument("--tracks", required=True)
    ts.add_argument("--min-lifetime", type=int, default=3, dest="min_lifetime")
    ts.add_argument("--out", required=True)
    ts.set_defaults(func=cmd_track_stats)
    return parser


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except EventVOError as exc:
        print(f"error [{type(exc).__module__}.{type(exc).__name__}]: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    except FileNotFoundError as exc:
        print(f"error [missing file]: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR


if __name__ == "__main__":
    sys.exit(main())
