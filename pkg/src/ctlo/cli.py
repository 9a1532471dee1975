"""``odom`` command line: run, eval, sim."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .bench import report
from .dataset import DatasetReader, read_poses, write_trajectory
from .errors import OdometryError
from .metrics import evaluate
from .pipeline import PipelineConfig, run
from .sim import export_dataset, straight_run

log = logging.getLogger("ctlo")

_MODES = {"icp": "icp_only", "icp_only": "icp_only", "doppler": "doppler"}


def _cmd_run(args) -> int:
    if args.dump_config:
        cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
        sys.stdout.write(cfg.dumps())
        return 0
    if not args.dataset:
        log.error("--dataset is required")
        return 2
    if args.config:
        cfg = PipelineConfig.load(args.config)
    elif (Path(args.dataset) / "config.yaml").exists():
        cfg = PipelineConfig.load(Path(args.dataset) / "config.yaml")
    else:
        cfg = PipelineConfig()
    if args.mode:
        cfg.mode = _MODES[args.mode]
    if args.range_limit is not None:
        cfg.range_limit = args.range_limit
    cfg.validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reader = DatasetReader(args.dataset, limit=args.frames)
    result = run(cfg, reader)
    write_trajectory(result, out / "trajectory.txt")
    cfg.dump(out / "config.yaml")
    if args.timing:
        _, text = report(result)
        (out / "timing.txt").write_text(text)
        sys.stdout.write(text)
    log.info("%d frames processed, trajectory in %s", len(result), out / "trajectory.txt")
    if result.diverged:
        log.warning("diverged frames: %s", result.diverged)
    return 0


def _cmd_eval(args) -> int:
    est = read_poses(args.est)
    gt = read_poses(args.gt)
    rep = evaluate(est, gt, args.exclude_first)
    sys.stdout.write(rep.text())
    if args.plot_data:
        Path(args.plot_data).write_text(rep.plot_data())
    return 0


def _cmd_sim(args) -> int:
    traj, scene, sensor, n = straight_run(args.scene, args.speed, seed=args.seed, n_frames=args.frames,
                                          moving_objects=args.moving_objects)
    export_dataset(traj, scene, sensor, n, args.out, args.seed)
    log.info("wrote %d %s frames to %s", n, args.scene, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="odom", description="Continuous-time Doppler/ICP lidar odometry.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="estimate a trajectory for a dataset directory")
    r.add_argument("--config")
    r.add_argument("--dataset")
    r.add_argument("--mode", choices=sorted(_MODES))
    r.add_argument("--range-limit", type=float)
    r.add_argument("--out", default="out")
    r.add_argument("--frames", type=int, help="process only the first N frames")
    r.add_argument("--timing", action="store_true", help="write a per-stage timing report")
    r.add_argument("--dump-config", action="store_true", help="print the effective configuration and exit")
    r.set_defaults(func=_cmd_run)

    e = sub.add_parser("eval", help="compare an estimated trajectory with ground truth")
    e.add_argument("--est", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--exclude-first", type=int, default=0)
    e.add_argument("--plot-data", help="write columnar error data to this file")
    e.set_defaults(func=_cmd_eval)

    s = sub.add_parser("sim", help="generate a synthetic FMCW dataset")
    s.add_argument("--scene", choices=["tunnel", "corridor", "box"], default="tunnel")
    s.add_argument("--speed", type=float, default=10.0)
    s.add_argument("--frames", type=int, default=100)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--moving-objects", type=int, default=0)
    s.set_defaults(func=_cmd_sim)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except OdometryError as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
