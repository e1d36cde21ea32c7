"""Simulated odometry runs: corridor RMSE and start-to-end drift of a room loop."""

import argparse
import json
import time

from pvmap.pipeline import RunConfig, evaluate, loop_drift, run_odometry, simulate_scans
from pvmap.pipeline.bench import stage_report


def run(cfg: RunConfig, output_dir=None) -> dict:
    t0 = time.perf_counter()
    _, gt, scans = simulate_scans(cfg)
    res = run_odometry(cfg, scans, output_dir=output_dir)
    out = {
        "scene": cfg.sim_scene,
        "trajectory": cfg.sim_trajectory,
        "frames": len(res.poses),
        "seconds": time.perf_counter() - t0,
        "rmse": evaluate(res.poses, gt).rmse,
        "flagged": res.flagged,
        "stages": {k: v["mean"] for k, v in stage_report(res.diagnostics).items() if isinstance(v, dict)},
    }
    if cfg.sim_trajectory == "loop":
        out["loop_drift"] = loop_drift(res.poses)
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--frames", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--output-dir", help="write poses and diagnostics of each run under this directory")
    args = ap.parse_args(argv)
    runs = {
        "corridor": RunConfig(seed=args.seed, sim_scene="corridor", sim_trajectory="corridor", sim_frames=args.frames),
        "loop": RunConfig(seed=args.seed, sim_scene="room", sim_trajectory="loop", sim_frames=args.frames, sim_start_y=-3.0),
    }
    report = {}
    for name, cfg in runs.items():
        report[name] = run(cfg, None if not args.output_dir else f"{args.output_dir}/{name}")
    print(json.dumps(report, indent=2))


if __name__ == "__main__":
    main()
