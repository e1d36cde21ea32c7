"""Latency measurements: per-frame stage split and map-size query scaling."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from ..simulator import rng_for
from ..voxelmap import MapConfig, VoxelMap

STAGES = ("preprocess", "match", "update", "insert")


def stage_report(diagnostics: list[dict]) -> dict:
    """Mean/std/max wall time (s) per stage over the registered frames."""
    rows = [d for d in diagnostics if not d.get("skipped")]
    out = {}
    for name in (*STAGES, "total"):
        v = np.array([d.get(f"time_{name}", 0.0) for d in rows], dtype=float)
        out[name] = {
            "mean": float(v.mean()) if len(v) else 0.0,
            "std": float(v.std()) if len(v) else 0.0,
            "max": float(v.max()) if len(v) else 0.0,
        }
    total = out["total"]["mean"]
    parts = sum(out[s]["mean"] for s in STAGES)
    out["stage_sum_over_total"] = parts / total if total > 0 else 1.0
    return out


def lattice_map(roots: int, points_per_root: int = 12, voxel_size: float = 2.0, seed: int = 0) -> VoxelMap:
    """Map with ``roots`` populated root voxels, each holding one small plane."""
    rng = rng_for(seed, 7)
    side = int(np.ceil(roots ** (1 / 3)))
    idx = np.arange(roots)
    keys = np.stack([idx % side, (idx // side) % side, idx // (side * side)], axis=1) - side // 2
    # A horizontal patch at a random height inside each root.
    uv = rng.uniform(0.1, 0.9, size=(roots, points_per_root, 2))
    h = rng.uniform(0.2, 0.8, size=(roots, 1))
    local = np.concatenate([uv, np.broadcast_to(h[:, :, None], (roots, points_per_root, 1))], axis=2)
    pts = (keys[:, None, :] + local) * voxel_size
    pts = pts.reshape(-1, 3)
    covs = np.broadcast_to(np.eye(3) * 1e-4, (len(pts), 3, 3))
    vmap = VoxelMap(MapConfig(voxel_size=voxel_size))
    vmap.insert(pts, covs, viewpoint=np.array([0.0, 0.0, 1e3]))
    return vmap


def query_latency(vmap: VoxelMap, queries: int = 10000, seed: int = 0, repeats: int = 3) -> float:
    """Mean seconds per :meth:`VoxelMap.query` over points in populated roots.

    One warm pass fills the per-root plane cache; the best of ``repeats``
    timed passes is reported.
    """
    rng = rng_for(seed, 8)
    V = vmap.config.voxel_size
    keys = np.array(sorted(vmap.roots)) if len(vmap) else np.zeros((1, 3))
    pick = keys[rng.integers(0, len(keys), size=queries)]
    P = (pick + rng.uniform(0, 1, size=(queries, 3))) * V
    for p in P:
        vmap.query(p)
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        for p in P:
            vmap.query(p)
        best = min(best, time.perf_counter() - t0)
    return best / queries


@dataclass
class ScalingPoint:
    roots: int
    planes: int
    latency: float


def query_scaling(root_counts=(1000, 10000, 100000), queries: int = 10000, seed: int = 0) -> list[ScalingPoint]:
    out = []
    for n in root_counts:
        vmap = lattice_map(n, seed=seed) if n else VoxelMap()
        out.append(ScalingPoint(len(vmap), vmap.stats().planes, query_latency(vmap, queries, seed)))
    return out
