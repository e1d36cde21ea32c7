"""Sequential odometry runs over scan files or in-memory scans."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..estimator import Odometry
from ..geom import Pose
from ..simulator import SCENES, make_trajectory, simulate_scan
from ..voxelmap import MapStats, VoxelMap
from .config import RunConfig
from .io import SCAN_SUFFIX, Scan, list_scans, load_scan, save_scan, write_poses, format_pose

log = logging.getLogger(__name__)

POSES_FILE = "poses.txt"
DIAGNOSTICS_FILE = "diagnostics.jsonl"
STATS_FILE = "stats.json"
GROUND_TRUTH_FILE = "ground_truth.txt"
SCENE_FILE = "scene.txt"


@dataclass
class RunResult:
    poses: list[Pose] = field(default_factory=list)
    diagnostics: list[dict] = field(default_factory=list)
    stats: MapStats | None = None
    skipped: int = 0
    odometry: Odometry | None = None

    @property
    def flagged(self) -> int:
        return sum(bool(d.get("flagged")) for d in self.diagnostics)


def stats_dict(stats: MapStats) -> dict:
    return {
        "planes_by_size": {f"{k:g}": v for k, v in stats.planes_by_size.items()},
        "planes": stats.planes,
        "roots": stats.roots,
        "nodes": stats.nodes,
        "points_stored": stats.points_stored,
        "converged_planes": stats.converged_planes,
        "undecided_nodes": stats.undecided_nodes,
        "exhausted_nodes": stats.exhausted_nodes,
    }


def _scan_source(config: RunConfig) -> list:
    """``(name, loader)`` for every scan file of the run.

    Listing happens up front so a missing directory fails before any output
    file is created.
    """
    paths = list_scans(config.scan_dir, config.scan_format)
    if config.max_frames:
        paths = paths[: config.max_frames]
    return [(p.name, (lambda p=p: load_scan(p, config.scan_format))) for p in paths]


def run_odometry(config: RunConfig, scans=None, output_dir=None) -> RunResult:
    """Register every scan in order and optionally write the run to disk.

    ``scans`` is an iterable of :class:`Scan` (or anything with ``omega`` and
    ``depth``); when omitted, files are read from ``config.scan_dir``. With an
    output directory the trajectory and diagnostics are appended and flushed
    frame by frame, so an interrupted run leaves a valid prefix. A frame whose
    file cannot be read or whose update raises is logged and skipped.
    """
    odo = Odometry(VoxelMap(config.map_config()), config.noise(), config.estimator_config())
    result = RunResult(odometry=odo)
    if scans is None:
        source = _scan_source(config)
    else:
        items = list(scans)
        if config.max_frames:
            items = items[: config.max_frames]
        source = ((f"frame{k:06d}", (lambda s=s: s)) for k, s in enumerate(items))
    out = None if output_dir is None else Path(output_dir)
    pose_fh = diag_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        pose_fh = open(out / POSES_FILE, "w")
        diag_fh = open(out / DIAGNOSTICS_FILE, "w")
        for line in config.header_lines():
            pose_fh.write(f"# {line}\n")
        diag_fh.write(json.dumps({"config": config.to_dict()}) + "\n")
    try:
        for k, (name, load) in enumerate(source):
            try:
                scan = load()
                res = odo.register_scan(np.asarray(scan.omega, dtype=float), np.asarray(scan.depth, dtype=float))
            except (ValueError, OSError, np.linalg.LinAlgError) as exc:
                log.warning("frame %d (%s) skipped: %s", k, name, exc)
                result.skipped += 1
                record = {"frame": k, "source": name, "skipped": True, "error": str(exc)}
                result.diagnostics.append(record)
                if diag_fh is not None:
                    diag_fh.write(json.dumps(record) + "\n")
                    diag_fh.flush()
                continue
            if res.flagged:
                log.warning("frame %d (%s): degenerate geometry, prior kept", k, name)
            pose = res.state.pose
            result.poses.append(pose)
            record = {"source": name, **res.diagnostics()}
            result.diagnostics.append(record)
            if pose_fh is not None:
                pose_fh.write(format_pose(pose) + "\n")
                pose_fh.flush()
                diag_fh.write(json.dumps(record) + "\n")
                diag_fh.flush()
    finally:
        if pose_fh is not None:
            pose_fh.close()
            diag_fh.close()
    result.stats = odo.map.stats()
    if out is not None:
        payload = {"config": config.to_dict(), "frames": len(result.poses), "skipped": result.skipped}
        payload["map"] = stats_dict(result.stats)
        (out / STATS_FILE).write_text(json.dumps(payload, indent=2) + "\n")
    return result


# ------------------------------------------------------------- simulation


def simulate_poses(config: RunConfig) -> list[Pose]:
    start = [config.sim_start_x, config.sim_start_y, config.sim_start_z]
    return make_trajectory(config.sim_trajectory, config.sim_frames, speed=config.sim_speed, radius=config.sim_radius, start=start)


def simulate_scans(config: RunConfig):
    """Ground-truth poses (relative to the first frame) and noisy scans."""
    if config.sim_scene not in SCENES:
        raise ValueError(f"unknown scene {config.sim_scene!r}; choose from {', '.join(SCENES)}")
    scene = SCENES[config.sim_scene]()
    traj = simulate_poses(config)
    noise = config.noise()
    pattern = config.pattern()
    scans = []
    for k, pose in enumerate(traj):
        sc = simulate_scan(scene, pose, noise, seed=config.seed * 100003 + k, pattern=pattern, max_range=config.sim_max_range)
        scans.append(Scan(sc.omega, sc.depth, sc.patch_id))
    gt = [traj[0].inverse().compose(p) for p in traj] if traj else []
    return scene, gt, scans


def write_simulation(config: RunConfig, output_dir) -> Path:
    """Scene file, ground truth and one scan file per frame under ``output_dir``.

    Scans go to ``output_dir/scans`` in ``config.scan_format``.
    """
    out = Path(output_dir)
    scan_dir = out / "scans"
    scan_dir.mkdir(parents=True, exist_ok=True)
    scene, gt, scans = simulate_scans(config)
    scene.save(out / SCENE_FILE)
    write_poses(out / GROUND_TRUTH_FILE, gt, header=config.header_lines())
    suffix = SCAN_SUFFIX[config.scan_format]
    for k, sc in enumerate(scans):
        save_scan(scan_dir / f"{k:06d}{suffix}", sc, config.scan_format)
    (out / "config.yaml").write_text(config.replace(scan_dir=str(scan_dir)).to_yaml())
    return scan_dir
