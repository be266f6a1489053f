"""Command-line entry point.

Subcommands: simulate, track, map, slam, evaluate, print-config.
Common flags: --config <path> --dataset <dir> --out <dir> --threads <n> --seed <u64>.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np


def _load_config(args):
    from .config import PipelineConfig

    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.run_seed = args.seed
    if args.threads is not None:
        cfg.run_threads = args.threads
    return cfg


def _add_common(p):
    p.add_argument("--config", help="flat key-value config file")
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="evslam",
        description="monocular event-camera SLAM: hybrid tracking and dense mapping",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, desc in (
        ("simulate", "generate a synthetic dataset"),
        ("track", "run the hybrid tracker, write trajectory.txt"),
        ("map", "run mapping over a trajectory"),
        ("slam", "tracking and mapping in two threads"),
        ("evaluate", "trajectory/depth metrics to metrics.json"),
        ("print-config", "dump every config key with its default"),
    ):
        p = sub.add_parser(name, help=desc)
        _add_common(p)
        if name == "map":
            p.add_argument("--trajectory", help="TUM file (default: groundtruth.txt)")
        if name == "evaluate":
            p.add_argument("--trajectory", help="estimated TUM file "
                           "(default: <out>/trajectory.txt)")
    args = parser.parse_args(argv)

    if args.command == "print-config":
        from .config import PipelineConfig

        cfg = _load_config(args)
        sys.stdout.write(cfg.dump())
        return 0

    cfg = _load_config(args)

    if args.command == "simulate":
        if not args.out:
            parser.error("simulate requires --out")
        from .pipeline import run_simulate

        stats = run_simulate(cfg, args.out)
        print(f"wrote dataset to {args.out}: {stats['events']} events, "
              f"{stats['frames']} frames, {stats['imu']} imu samples")
        return 0

    if args.command == "track":
        if not args.dataset or not args.out:
            parser.error("track requires --dataset and --out")
        from .pipeline import run_tracking

        result = run_tracking(cfg, args.dataset, out_dir=args.out)
        print(f"tracked {result.keyframe_count} keyframes -> "
              f"{os.path.join(args.out, 'trajectory.txt')}")
        return 0

    if args.command == "map":
        if not args.dataset or not args.out:
            parser.error("map requires --dataset and --out")
        from .dataio import load_tum
        from .pipeline import run_mapping

        traj_path = args.trajectory or os.path.join(args.dataset, "groundtruth.txt")
        trajectory = load_tum(traj_path)
        result = run_mapping(cfg, args.dataset, trajectory, out_dir=args.out)
        print(f"mapped {len(result.products)} reference views "
              f"({result.skipped_rvs} skipped), mesh: "
              f"{len(result.mesh.vertices)} vertices")
        return 0

    if args.command == "slam":
        if not args.dataset or not args.out:
            parser.error("slam requires --dataset and --out")
        from .pipeline import run_slam

        track_result, map_result = run_slam(cfg, args.dataset, out_dir=args.out)
        print(f"slam: {track_result.keyframe_count} keyframes, "
              f"{len(map_result.products)} reference views")
        return 0

    if args.command == "evaluate":
        if not args.dataset or not args.out:
            parser.error("evaluate requires --dataset and --out")
        from .dataio import load_tum
        from .pipeline import evaluate_run

        est_path = args.trajectory or os.path.join(args.out, "trajectory.txt")
        est = load_tum(est_path)
        gt = load_tum(os.path.join(args.dataset, "groundtruth.txt"))
        report = evaluate_run(est, gt)
        out_path = os.path.join(args.out, "metrics.json")
        with open(out_path, "w") as f:
            f.write(report.to_json() + "\n")
        print(f"ATE {report.ate_m * 100:.2f} cm over "
              f"{report.trajectory_length_m:.2f} m -> {out_path}")
        return 0

    parser.error(f"unknown command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
