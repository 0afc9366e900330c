"""Command line entry points: track, simulate, evaluate.

Every command resolves its configuration up front, runs, and only then
writes its outputs, so a failed run leaves nothing half-written.  Each
run also emits a JSON manifest recording the resolved configuration,
SHA-256 digests of the inputs, and the seeds used — re-running a command
with the inputs and configuration from a manifest reproduces the data
outputs bit for bit.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys

from PIL import Image

from . import __version__
from .events import PacketPolicy, load_events, save_events
from .evaluate import evaluate_trajectories, write_histogram_csv
from .geometry import CameraIntrinsics
from .slam import PipelineConfig, run, samples_to_trajectory
from .synthgen import SynthConfig, SynthPanorama, generate_events
from .tracker import TrackerConfig
from .trajectories import load_trajectory, save_trajectory


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(path, command: str, config: dict, inputs: dict,
                    outputs: dict, seed=None) -> None:
    doc = {
        "version": __version__,
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {name: {"path": str(p), "sha256": _sha256(p)}
                   for name, p in inputs.items()},
        "outputs": {name: str(p) for name, p in outputs.items()},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# track
# ---------------------------------------------------------------------------

def cmd_track(args) -> int:
    intr = CameraIntrinsics.from_file(args.calib)
    events = load_events(args.events)
    if args.packet_dt is not None:
        policy = PacketPolicy.by_time(args.packet_dt)
    else:
        policy = PacketPolicy.by_count(args.packet_size)
    cfg = PipelineConfig(
        packet_policy=policy,
        tracker=TrackerConfig(alpha=args.alpha, beta=args.beta,
                              max_iters=args.iters),
        bootstrap_packets=args.bootstrap_packets,
        residual_gate=args.residual_gate,
    )
    samples, pmap, stats = run(events, intr, cfg, upsample=args.upsample)

    save_trajectory(args.traj_out, samples_to_trajectory(samples))
    outputs = {"trajectory": args.traj_out}
    if args.map_out:
        Image.fromarray(pmap.export_image()).save(args.map_out)
        outputs["map_image"] = args.map_out
    if args.stats_out:
        with open(args.stats_out, "w") as fh:
            fh.write(stats.report() + "\n")
        outputs["stats"] = args.stats_out
    config = {
        "packet_size": args.packet_size,
        "packet_dt": args.packet_dt,
        "iters": args.iters,
        "alpha": args.alpha,
        "beta": args.beta,
        "upsample": args.upsample,
        "residual_gate": args.residual_gate,
        "bootstrap_packets": args.bootstrap_packets,
    }
    _write_manifest(args.manifest_out or args.traj_out + ".manifest.json",
                    "track", config,
                    {"events": args.events, "calib": args.calib}, outputs)
    print(stats.summary_line())
    print(stats.report())
    return 0


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    intr = CameraIntrinsics.from_file(args.calib)
    pano = SynthPanorama.from_image(args.panorama)
    traj = load_trajectory(args.trajectory, quat_order=args.quat_order)
    cfg = SynthConfig(C=args.contrast_threshold,
                      segment_length=args.segment_length,
                      noise_rate=args.noise_rate)
    events, gt = generate_events(pano, traj, intr, cfg, rng_seed=args.seed)

    save_events(args.events_out, events)
    save_trajectory(args.gt_out, gt)
    config = {
        "contrast_threshold": args.contrast_threshold,
        "segment_length": args.segment_length,
        "noise_rate": args.noise_rate,
        "quat_order": args.quat_order,
    }
    _write_manifest(args.manifest_out or args.events_out + ".manifest.json",
                    "simulate", config,
                    {"panorama": args.panorama, "trajectory": args.trajectory,
                     "calib": args.calib},
                    {"events": args.events_out, "ground_truth": args.gt_out},
                    seed=args.seed)
    print(f"wrote {len(events)} events from {len(traj)} trajectory samples")
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def cmd_evaluate(args) -> int:
    est = load_trajectory(args.est, quat_order=args.quat_order)
    gt = load_trajectory(args.gt, quat_order=args.quat_order)
    report = evaluate_trajectories(est, gt, iterations=args.ransac_iters,
                                   inlier_threshold_deg=args.inlier_threshold_deg,
                                   rng_seed=args.seed)
    table = report.text_table()

    with open(args.report_out, "w") as fh:
        fh.write(table + "\n")
    write_histogram_csv(args.hist_out, report.stats)
    config = {
        "ransac_iters": args.ransac_iters,
        "inlier_threshold_deg": args.inlier_threshold_deg,
        "quat_order": args.quat_order,
    }
    _write_manifest(args.manifest_out or args.report_out + ".manifest.json",
                    "evaluate", config,
                    {"est": args.est, "gt": args.gt},
                    {"report": args.report_out, "histogram": args.hist_out},
                    seed=args.seed)
    print(table)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evpano",
        description="Rotation-only panoramic tracking for event cameras.")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("track", help="estimate a trajectory from an event file")
    t.add_argument("events", help="event file with `t x y p` lines")
    t.add_argument("calib", help="calibration file: fx fy cx cy [width height]")
    t.add_argument("--packet-size", type=int, default=1500,
                   help="events per packet (default 1500)")
    t.add_argument("--packet-dt", type=float, default=None,
                   help="seconds per packet; overrides --packet-size")
    t.add_argument("--iters", type=int, default=10,
                   help="refinement iterations per packet (default 10)")
    t.add_argument("--alpha", type=float, default=1.0,
                   help="step damping toward the previous pose (default 1)")
    t.add_argument("--beta", type=float, default=0.4,
                   help="iterate momentum, 0 disables (default 0.4)")
    t.add_argument("--upsample", type=float, default=1.0,
                   help="map resolution relative to the sensor (default 1)")
    t.add_argument("--residual-gate", type=float, default=0.85,
                   help="skip map updates above this mean residual (default 0.85)")
    t.add_argument("--bootstrap-packets", type=int, default=10,
                   help="packets mapped at a fixed pose before tracking starts")
    t.add_argument("--traj-out", default="trajectory.txt")
    t.add_argument("--map-out", default=None, help="panorama image (PNG)")
    t.add_argument("--stats-out", default=None, help="timing/counter report")
    t.add_argument("--manifest-out", default=None)
    t.set_defaults(func=cmd_track)

    s = sub.add_parser("simulate",
                       help="generate an event stream from a panorama image")
    s.add_argument("panorama", help="8/16-bit grayscale panorama image")
    s.add_argument("trajectory", help="trajectory file to fly through")
    s.add_argument("--calib", required=True,
                   help="calibration file for the simulated camera")
    s.add_argument("--contrast-threshold", type=float, default=0.1)
    s.add_argument("--segment-length", type=float, default=0.5,
                   help="max pixels of motion per integration sub-segment")
    s.add_argument("--noise-rate", type=float, default=0.0,
                   help="uniform noise events per pixel per second")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--quat-order", choices=("wxyz", "xyzw"), default="wxyz",
                   help="component order for quaternion trajectory files")
    s.add_argument("--events-out", default="events.txt")
    s.add_argument("--gt-out", default="gt.txt")
    s.add_argument("--manifest-out", default=None)
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("evaluate",
                       help="compare an estimated trajectory to a reference")
    e.add_argument("est", help="estimated trajectory file")
    e.add_argument("gt", help="reference trajectory file")
    e.add_argument("--ransac-iters", type=int, default=1000)
    e.add_argument("--inlier-threshold-deg", type=float, default=5.0)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--quat-order", choices=("wxyz", "xyzw"), default="wxyz",
                   help="component order for quaternion trajectory files")
    e.add_argument("--report-out", default="report.txt")
    e.add_argument("--hist-out", default="hist.csv")
    e.add_argument("--manifest-out", default=None)
    e.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
