"""Absolute trajectory error after aligning on the first part of the run."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from ..geom import Pose

MIN_ALIGN_POSES = 5


class AlignmentError(ValueError):
    """Too few poses to estimate the alignment."""


@dataclass
class EvalResult:
    rmse: float
    errors: np.ndarray  # per-frame translational error after alignment (m)
    R: np.ndarray  # alignment applied to the estimate
    t: np.ndarray
    aligned_frames: int

    @property
    def max_error(self) -> float:
        return float(self.errors.max()) if len(self.errors) else 0.0

    def summary(self) -> dict:
        return {
            "rmse": self.rmse,
            "max_error": self.max_error,
            "final_error": float(self.errors[-1]) if len(self.errors) else 0.0,
            "frames": len(self.errors),
            "aligned_frames": self.aligned_frames,
        }


def _positions(traj) -> np.ndarray:
    if isinstance(traj, np.ndarray):
        return np.asarray(traj, dtype=float).reshape(-1, 3)
    return np.array([p.t for p in traj], dtype=float).reshape(-1, 3)


def rigid_align(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares ``R, t`` with ``R @ src_i + t ~ dst_i`` (no scale)."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    if len(src) < 2 or np.allclose(src - cs, 0.0):
        return np.eye(3), cd - cs
    with warnings.catch_warnings():
        # Collinear windows (straight runs) leave the roll about the line
        # free; scipy then returns the smallest rotation, which is fine here.
        warnings.simplefilter("ignore", UserWarning)
        rot, _ = Rotation.align_vectors(dst - cd, src - cs)
    R = rot.as_matrix()
    return R, cd - R @ cs


def icp_align(src: np.ndarray, dst: np.ndarray, iters: int = 50, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-neighbour ICP of the ``src`` positions onto the ``dst`` positions.

    Starts from the correspondence-based alignment, so with exact
    correspondences it returns the same transform.
    """
    R, t = rigid_align(src, dst)
    tree = cKDTree(dst)
    prev = np.inf
    for _ in range(iters):
        moved = src @ R.T + t
        dist, idx = tree.query(moved)
        R, t = rigid_align(src, dst[idx])
        err = float(np.mean(dist**2))
        if abs(prev - err) < tol:
            break
        prev = err
    return R, t


def alignment_window(n: int, fraction: float = 0.2) -> int:
    return int(math.ceil(fraction * n))


def evaluate(traj, ground_truth, fraction: float = 0.2, icp: bool = False) -> EvalResult:
    """RMSE of the absolute translational error.

    The rigid transform is estimated from the first ``fraction`` of the
    positions (frame-associated closed form, or nearest-neighbour ICP when
    ``icp`` is set) and applied to the whole estimate.
    """
    est = _positions(traj)
    gt = _positions(ground_truth)
    if len(est) != len(gt):
        raise ValueError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    m = alignment_window(len(est), fraction)
    if m < MIN_ALIGN_POSES:
        raise AlignmentError(f"alignment window holds {m} poses, need at least {MIN_ALIGN_POSES}")
    align = icp_align if icp else rigid_align
    R, t = align(est[:m], gt[:m])
    err = np.linalg.norm(est @ R.T + t - gt, axis=1)
    return EvalResult(float(np.sqrt(np.mean(err**2))), err, R, t, m)


def loop_drift(traj) -> float:
    """Distance between the first and last estimated positions."""
    p = _positions(traj)
    return float(np.linalg.norm(p[-1] - p[0])) if len(p) else 0.0


def relative_to_first(poses: list[Pose]) -> list[Pose]:
    if not poses:
        return []
    inv = poses[0].inverse()
    return [inv.compose(p) for p in poses]
