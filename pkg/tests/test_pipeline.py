import json

import numpy as np
import pytest
import yaml

from pvmap.geom import Pose, so3_exp
from pvmap.pipeline import cli
from pvmap.pipeline.bench import lattice_map, query_latency, query_scaling, stage_report
from pvmap.pipeline.config import ConfigError, RunConfig
from pvmap.pipeline.evaluate import AlignmentError, alignment_window, evaluate, icp_align, loop_drift, rigid_align
from pvmap.pipeline.io import (
    Scan,
    ScanParseError,
    UnknownFormatError,
    format_pose,
    list_scans,
    load_scan,
    read_poses,
    save_scan,
    write_poses,
)
from pvmap.pipeline.odometry import POSES_FILE, run_odometry, simulate_scans, write_simulation

from conftest import random_rotation

SMALL = dict(
    sim_scene="room",
    sim_trajectory="corridor",
    sim_frames=6,
    sim_speed=0.05,
    sim_azimuths=240,
    sim_elevations=12,
)


def small_config(**kw):
    return RunConfig(**{**SMALL, **kw})


# ------------------------------------------------------------------ config


def test_config_defaults_follow_the_design():
    c = RunConfig()
    assert (c.voxel_size, c.max_layer, c.plane_threshold, c.n_conv, c.k_recent) == (2.0, 3, 0.01, 50, 10)
    assert c.map_config().update.rebuild_angle == pytest.approx(np.deg2rad(10.0))
    assert np.allclose(np.diag(c.estimator_config().process_noise()), [1e-4] * 3 + [1e-2] * 3)


def test_config_unknown_key_rejected(tmp_path):
    with pytest.raises(ConfigError, match="voxel_sise"):
        RunConfig.from_dict({"voxel_sise": 1.0})
    p = tmp_path / "c.yaml"
    p.write_text("voxel_size: 1.0\nbogus: 3\n")
    with pytest.raises(ConfigError):
        RunConfig.load(p)


@pytest.mark.parametrize("bad", [{"voxel_size": -1.0}, {"max_layer": 0}, {"scan_format": "las"}, {"max_iter": "5"}, {"rematch": 1}])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(bad)


def test_config_yaml_round_trip(tmp_path):
    c = RunConfig(voxel_size=1, seed=7, rematch=False, scan_dir="x")
    assert isinstance(c.voxel_size, float)
    p = tmp_path / "c.yaml"
    c.dump(p)
    assert RunConfig.load(p) == c
    assert yaml.safe_load(c.to_yaml())["seed"] == 7


# --------------------------------------------------------------------- io


def test_kitti_single_record(tmp_path):
    p = tmp_path / "a.bin"
    p.write_bytes(np.array([1, 0, 0, 0.5], dtype="<f4").tobytes())
    s = load_scan(p, "kitti-bin")
    assert len(s) == 1 and np.allclose(s.omega, [[1, 0, 0]]) and s.depth[0] == 1.0


def test_empty_files(tmp_path):
    for fmt, suffix in [("kitti-bin", ".bin"), ("sim", ".sim")]:
        p = tmp_path / f"e{suffix}"
        p.write_bytes(b"")
        assert len(load_scan(p, fmt)) == 0


def test_kitti_truncated_reports_offset(tmp_path):
    p = tmp_path / "t.bin"
    p.write_bytes(np.zeros(9, dtype="<f4").tobytes())
    with pytest.raises(ScanParseError, match="byte offset 32"):
        load_scan(p, "kitti-bin")


def test_unknown_format(tmp_path):
    with pytest.raises(UnknownFormatError):
        load_scan(tmp_path / "x", "las")
    with pytest.raises(UnknownFormatError):
        list_scans(tmp_path, "las")


def test_zero_range_dropped():
    s = Scan.from_points([[0, 0, 0], [0, 3, 4]])
    assert len(s) == 1 and s.depth[0] == 5.0


@pytest.mark.parametrize("fmt,tol", [("sim", 0.0), ("kitti-bin", 1e-6), ("ply-ascii", 1e-6)])
def test_scan_round_trip(tmp_path, fmt, tol):
    _, _, scans = simulate_scans(small_config(sim_frames=1))
    s = scans[0]
    p = tmp_path / f"s.{fmt}"
    save_scan(p, s, fmt)
    back = load_scan(p, fmt)
    assert len(back) == len(s)
    assert np.abs(back.omega - s.omega).max() <= tol
    assert np.abs(back.depth - s.depth).max() <= tol * max(1.0, s.depth.max())
    if fmt == "sim":
        assert np.array_equal(back.patch_id, s.patch_id)


def test_ply_errors(tmp_path):
    p = tmp_path / "b.ply"
    p.write_text("ply\nformat binary_little_endian 1.0\nend_header\n")
    with pytest.raises(ScanParseError, match="ASCII"):
        load_scan(p, "ply-ascii")
    p.write_text("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n")
    with pytest.raises(ScanParseError, match="expected 2 vertices"):
        load_scan(p, "ply-ascii")


def test_sim_parse_error_offset(tmp_path):
    p = tmp_path / "bad.sim"
    p.write_text("# header\n1 0 0 2 0\n1 0 0\n")
    with pytest.raises(ScanParseError, match="byte offset 19"):
        load_scan(p, "sim")


def test_pose_golden_line():
    pose = Pose(np.eye(3), np.array([1.0, -2.0, 0.5]))
    assert format_pose(pose) == (
        "1.000000000000e+00 0.000000000000e+00 0.000000000000e+00 1.000000000000e+00 "
        "0.000000000000e+00 1.000000000000e+00 0.000000000000e+00 -2.000000000000e+00 "
        "0.000000000000e+00 0.000000000000e+00 1.000000000000e+00 5.000000000000e-01"
    )
    assert format_pose(pose, 1.5).startswith("1.500000000 1.0000")


def test_pose_file_round_trip(tmp_path, rng):
    poses = [Pose(random_rotation(rng), rng.normal(size=3)) for _ in range(5)]
    p = tmp_path / "poses.txt"
    write_poses(p, poses, timestamps=np.arange(5) * 0.1, header=["hello"])
    back, ts = read_poses(p)
    assert np.allclose(ts, np.arange(5) * 0.1)
    for a, b in zip(poses, back):
        assert np.abs(a.R - b.R).max() < 1e-11 and np.abs(a.t - b.t).max() < 1e-11


def test_pose_file_rejects_bad_rows(tmp_path):
    p = tmp_path / "p.txt"
    p.write_text("1 2 3\n")
    with pytest.raises(ScanParseError):
        read_poses(p)
    row = " ".join(["0"] * 12)
    p.write_text(f"2.0 {row}\n1.0 {row}\n")
    with pytest.raises(ScanParseError, match="monotone"):
        read_poses(p)


# --------------------------------------------------------------- evaluate


def random_walk(rng, n):
    return np.cumsum(rng.normal(size=(n, 3)), axis=0)


def test_evaluate_identity_and_rigid(rng):
    gt = random_walk(rng, 50)
    assert evaluate(gt, gt).rmse < 1e-12
    R = random_rotation(rng)
    moved = gt @ R.T + [3, -1, 2]
    assert evaluate(moved, gt).rmse < 1e-9
    assert evaluate(moved, gt, icp=True).rmse < 1e-9


def test_evaluate_noise_level(rng):
    gt = random_walk(rng, 1000)
    est = gt + rng.normal(0, 0.1, gt.shape)
    assert abs(evaluate(est, gt).rmse / (0.1 * np.sqrt(3)) - 1) < 0.10


def test_evaluate_uses_leading_window(rng):
    gt = random_walk(rng, 50)
    est = gt.copy()
    est[25:] += [1.0, 0.0, 0.0]
    res = evaluate(est, gt)
    assert res.aligned_frames == alignment_window(50) == 10
    assert np.allclose(res.errors[:25], 0.0, atol=1e-9) and np.allclose(res.errors[25:], 1.0)


def test_evaluate_too_short(rng):
    gt = random_walk(rng, 20)
    with pytest.raises(AlignmentError):
        evaluate(gt, gt)
    assert evaluate(gt, gt, fraction=0.25).aligned_frames == 5
    with pytest.raises(ValueError):
        evaluate(gt[:10], gt)


def test_alignment_helpers(rng):
    src = rng.normal(size=(30, 3))
    R = random_rotation(rng)
    dst = src @ R.T + 1.0
    Ra, ta = rigid_align(src, dst)
    assert np.allclose(Ra, R) and np.allclose(ta, 1.0)
    Ri, ti = icp_align(src, dst)
    assert np.allclose(Ri, R)
    assert loop_drift(np.array([[0, 0, 0], [1, 1, 1], [0, 0, 0.5]])) == 0.5


# ---------------------------------------------------------------- running


def test_run_zero_frames(tmp_path):
    res = run_odometry(RunConfig(), scans=[], output_dir=tmp_path)
    assert res.poses == [] and res.stats.planes == 0
    lines = (tmp_path / POSES_FILE).read_text().splitlines()
    assert lines and all(line.startswith("#") for line in lines)


def test_run_is_deterministic(tmp_path):
    cfg = small_config()
    _, _, scans = simulate_scans(cfg)
    run_odometry(cfg, scans=scans, output_dir=tmp_path / "a")
    run_odometry(cfg, scans=scans, output_dir=tmp_path / "b")
    assert (tmp_path / "a" / POSES_FILE).read_bytes() == (tmp_path / "b" / POSES_FILE).read_bytes()


def test_run_outputs_and_tracking(tmp_path):
    cfg = small_config()
    _, gt, scans = simulate_scans(cfg)
    res = run_odometry(cfg, scans=scans, output_dir=tmp_path)
    assert len(res.poses) == 6 and res.skipped == 0
    err = [np.linalg.norm(p.t - g.t) for p, g in zip(res.poses, gt)]
    assert max(err) < 0.02
    diag = (tmp_path / "diagnostics.jsonl").read_text().splitlines()
    assert json.loads(diag[0])["config"] == cfg.to_dict()
    assert len(diag) == 7
    stats = json.loads((tmp_path / "stats.json").read_text())
    assert stats["frames"] == 6 and stats["map"]["planes"] == res.stats.planes
    poses, _ = read_poses(tmp_path / POSES_FILE)
    assert len(poses) == 6


def test_run_skips_unreadable_frames(tmp_path):
    cfg = small_config(sim_frames=3)
    scan_dir = write_simulation(cfg, tmp_path / "sim")
    (scan_dir / "000001.sim").write_text("garbage line\n")
    res = run_odometry(cfg.replace(scan_dir=str(scan_dir)))
    assert res.skipped == 1 and len(res.poses) == 2


def test_stage_breakdown_sums_to_total():
    cfg = small_config()
    _, _, scans = simulate_scans(cfg)
    rep = stage_report(run_odometry(cfg, scans=scans).diagnostics)
    assert abs(rep["stage_sum_over_total"] - 1.0) < 0.05
    assert set(rep) >= {"preprocess", "match", "update", "insert", "total"}


def test_lattice_map_and_query():
    vmap = lattice_map(64)
    assert len(vmap) == 64 and vmap.stats().planes == 64
    assert query_latency(vmap, queries=200) > 0
    pts = query_scaling([0, 27], queries=100)
    assert pts[0].roots == 0 and pts[1].planes == 27


# -------------------------------------------------------------------- cli


def test_cli_simulate_run_eval(tmp_path, capsys):
    sim = tmp_path / "sim"
    flags = ["--sim-scene", "room", "--sim-frames", "30", "--sim-speed", "0.05", "--sim-azimuths", "240", "--sim-elevations", "12"]
    assert cli.main(["simulate", *flags, "--output-dir", str(sim)]) == 0
    out = tmp_path / "run"
    assert cli.main(["run", "--config", str(sim / "config.yaml"), "--output-dir", str(out)]) == 0
    assert cli.main(["eval", "--est", str(out / POSES_FILE), "--gt", str(sim / "ground_truth.txt"), "--json", str(tmp_path / "e.json")]) == 0
    report = json.loads((tmp_path / "e.json").read_text())
    assert report["frames"] == 30 and report["rmse"] < 0.05
    # Too few frames for the alignment window.
    assert cli.main(["eval", "--est", str(out / POSES_FILE), "--gt", str(sim / "ground_truth.txt"), "--frames", "12"]) == cli.EXIT_EVAL
    err = capsys.readouterr().err
    assert "error[eval]" in err


def test_cli_error_categories(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("voxel_sise: 1\n")
    assert cli.main(["run", "--config", str(cfg)]) == cli.EXIT_USAGE
    assert cli.main(["run"]) == cli.EXIT_USAGE
    out = tmp_path / "never"
    assert cli.main(["run", "--scan-dir", str(tmp_path / "missing"), "--output-dir", str(out)]) == cli.EXIT_IO
    assert not out.exists()
    bad = tmp_path / "p.txt"
    bad.write_text("1 2\n")
    assert cli.main(["eval", "--est", str(bad), "--gt", str(bad)]) == cli.EXIT_IO
    err = capsys.readouterr().err
    assert "error[config]" in err and "error[io]" in err and "error[parse]" in err


def test_cli_map_dump(tmp_path, capsys):
    out = tmp_path / "map.txt"
    args = ["map-dump", "--sim-scene", "room", "--sim-frames", "2", "--sim-azimuths", "240", "--sim-elevations", "12", "--out", str(out)]
    assert cli.main(args) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("# ") and any(not line.startswith("#") for line in lines)
    assert json.loads(capsys.readouterr().out)["planes"] > 0
