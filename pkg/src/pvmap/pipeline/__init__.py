"""Operational shell: configuration, scan and pose I/O, runs, evaluation, benchmarks."""

from .bench import query_scaling, stage_report
from .config import ConfigError, RunConfig
from .evaluate import AlignmentError, EvalResult, evaluate, loop_drift, rigid_align
from .io import Scan, ScanParseError, UnknownFormatError, load_scan, read_poses, save_scan, write_poses
from .odometry import RunResult, run_odometry, simulate_scans, write_simulation

__all__ = [
    "AlignmentError",
    "ConfigError",
    "EvalResult",
    "RunConfig",
    "RunResult",
    "Scan",
    "ScanParseError",
    "UnknownFormatError",
    "evaluate",
    "load_scan",
    "loop_drift",
    "query_scaling",
    "read_poses",
    "rigid_align",
    "run_odometry",
    "save_scan",
    "simulate_scans",
    "stage_report",
    "write_poses",
    "write_simulation",
]
