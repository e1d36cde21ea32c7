"""Command line interface: ``pvmap {run,simulate,eval,bench,map-dump}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .bench import query_scaling, stage_report
from .config import ConfigError, RunConfig
from .evaluate import AlignmentError, evaluate, loop_drift
from .io import ScanParseError, UnknownFormatError, read_poses
from .odometry import POSES_FILE, run_odometry, simulate_scans, stats_dict, write_simulation

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_EVAL = 4

_PY_TYPES = {"float": float, "int": int, "str": str}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML file of flat RunConfig keys")
    g = p.add_argument_group("config overrides")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool":
            g.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            g.add_argument(flag, dest=f.name, type=_PY_TYPES[f.type], default=None, metavar=f.type.upper())


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig) if getattr(args, f.name, None) is not None}
    return cfg.replace(**overrides) if overrides else cfg


def _emit(payload: dict, path) -> None:
    text = json.dumps(payload, indent=2)
    if path:
        Path(path).write_text(text + "\n")
    print(text)


# ---------------------------------------------------------------- commands


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    if not cfg.scan_dir:
        raise ConfigError("scan_dir is required for 'run'")
    res = run_odometry(cfg, output_dir=cfg.output_dir)
    print(
        f"frames={len(res.poses)} skipped={res.skipped} flagged={res.flagged} "
        f"planes={res.stats.planes} output={Path(cfg.output_dir) / POSES_FILE}"
    )
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = resolve_config(args)
    scan_dir = write_simulation(cfg, cfg.output_dir)
    print(f"frames={cfg.sim_frames} scene={cfg.sim_scene} trajectory={cfg.sim_trajectory} scans={scan_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    est, _ = read_poses(args.est)
    gt, _ = read_poses(args.gt)
    if args.frames:
        est, gt = est[: args.frames], gt[: args.frames]
    res = evaluate(est, gt, fraction=args.fraction, icp=args.icp)
    payload = {
        "estimate": str(args.est),
        "ground_truth": str(args.gt),
        "fraction": args.fraction,
        "icp": args.icp,
        **res.summary(),
        "loop_drift": loop_drift(est),
    }
    _emit(payload, args.json)
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = resolve_config(args)
    if cfg.scan_dir:
        res = run_odometry(cfg)
    else:
        _, _, scans = simulate_scans(cfg)
        res = run_odometry(cfg, scans=scans)
    payload = {"config": cfg.to_dict(), "frames": len(res.poses), "stages": stage_report(res.diagnostics)}
    if args.roots:
        sweep = query_scaling(args.roots, queries=args.queries, seed=cfg.seed)
        payload["query_scaling"] = [{"roots": s.roots, "planes": s.planes, "latency_s": s.latency} for s in sweep]
        base = sweep[0].latency
        payload["latency_ratio"] = [s.latency / base for s in sweep]
    _emit(payload, args.json)
    return EXIT_OK


def cmd_map_dump(args) -> int:
    cfg = resolve_config(args)
    if cfg.scan_dir:
        res = run_odometry(cfg)
    else:
        _, _, scans = simulate_scans(cfg)
        res = run_odometry(cfg, scans=scans)
    vmap = res.odometry.map
    if args.out:
        with open(args.out, "w") as fh:
            for line in cfg.header_lines():
                fh.write(f"# {line}\n")
            n = vmap.dump(fh)
        print(json.dumps({"planes": n, "out": str(args.out), "map": stats_dict(res.stats)}))
    else:
        for line in cfg.header_lines():
            sys.stdout.write(f"# {line}\n")
        vmap.dump(sys.stdout)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pvmap", description="Probabilistic adaptive voxel map LiDAR odometry")
    ap.add_argument("-v", "--verbose", action="store_true", help="log per-frame warnings")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="odometry over a directory of scans")
    _add_config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("simulate", help="write a synthetic scene, scans and ground truth")
    _add_config_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("eval", help="RMSE after aligning on the first part of the trajectory")
    p.add_argument("--est", type=Path, required=True, help="estimated poses (KITTI rows)")
    p.add_argument("--gt", type=Path, required=True, help="ground-truth poses (KITTI rows)")
    p.add_argument("--fraction", type=float, default=0.2, help="leading fraction used for alignment")
    p.add_argument("--icp", action="store_true", help="nearest-neighbour ICP instead of frame correspondences")
    p.add_argument("--frames", type=int, default=0, help="evaluate only the first N frames")
    p.add_argument("--json", type=Path, help="also write the report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="per-stage frame timing and query scaling")
    _add_config_flags(p)
    p.add_argument("--roots", type=int, nargs="*", default=[1000, 10000], help="root counts for the query sweep")
    p.add_argument("--queries", type=int, default=10000)
    p.add_argument("--json", type=Path)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("map-dump", help="build a map from scans and write one line per plane")
    _add_config_flags(p)
    p.add_argument("--out", type=Path, help="dump file (default: stdout)")
    p.set_defaults(func=cmd_map_dump)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UnknownFormatError as exc:
        print(f"error[usage]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ScanParseError as exc:
        print(f"error[parse]: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return EXIT_IO
    except AlignmentError as exc:
        print(f"error[eval]: {exc}", file=sys.stderr)
        return EXIT_EVAL
    except ValueError as exc:
        print(f"error[input]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        print(f"error[internal]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
