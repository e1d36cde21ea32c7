"""Probabilistic point-to-plane association with a 3-sigma gate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .plane import PlaneFeature
from .uncertainty import WorldPoint
from .voxelmap import VoxelMap, hash_keys, group_by_key

VARIANCE_FLOOR = 1e-12
GATE_SIGMAS = 3.0
EXTENT_RADII = 3.0


@dataclass
class Match:
    point: WorldPoint
    plane: PlaneFeature
    distance: float
    variance: float
    index: int = -1  # position in the scan that was matched
    floored: bool = False


@dataclass
class MatchArrays:
    """Column-wise match results; ``index`` refers back into the input scan."""

    index: np.ndarray
    n: np.ndarray
    q: np.ndarray
    cov_nq: np.ndarray
    distance: np.ndarray
    variance: np.ndarray
    planes: list[PlaneFeature]

    def __len__(self) -> int:
        return len(self.index)


def point_to_plane(p, plane: PlaneFeature) -> float:
    return float(np.dot(plane.n, np.asarray(p, dtype=float) - plane.q))


def residual_variance(point: WorldPoint, plane: PlaneFeature) -> tuple[float, bool]:
    """Variance of the point-to-plane distance and whether it hit the floor.

    ``J = [(p - q)^T, -n^T, n^T]`` applied to ``blkdiag(cov_nq, cov_p)``.
    """
    J = np.concatenate([np.asarray(point.p) - plane.q, -plane.n])
    var = float(J @ plane.cov @ J + plane.n @ point.cov @ plane.n)
    if var < VARIANCE_FLOOR:
        return VARIANCE_FLOOR, True
    return var, False


def within_extent(p, plane: PlaneFeature) -> bool:
    """Whether the in-plane offset of ``p`` from ``q`` is within the plane's extent."""
    diff = np.asarray(p, dtype=float) - plane.q
    d = float(np.dot(plane.n, diff))
    lateral2 = max(float(diff @ diff) - d * d, 0.0)
    return lateral2 <= (EXTENT_RADII * plane.radius) ** 2


def _score(d, var):
    # Negative log of the Gaussian density up to constants.
    return d * d / var + np.log(var)


def match_point(point: WorldPoint, vmap: VoxelMap) -> Match | None:
    """Best gated plane for one point, or ``None`` if every candidate fails."""
    best = None
    best_score = np.inf
    for plane in vmap.query(point.p):
        if not within_extent(point.p, plane):
            continue
        d = point_to_plane(point.p, plane)
        var, floored = residual_variance(point, plane)
        if abs(d) > GATE_SIGMAS * np.sqrt(var):
            continue
        s = _score(d, var)
        if s < best_score:
            best_score = s
            best = Match(point, plane, d, var, floored=floored)
    return best


def match_arrays(points: np.ndarray, covs: np.ndarray, vmap: VoxelMap) -> MatchArrays:
    """Vectorised :func:`match_point` over a scan, grouped by root voxel.

    Results are returned in input order and are identical to matching each
    point on its own.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    covs = np.asarray(covs, dtype=float).reshape(-1, 3, 3)
    n_pts = len(points)
    chosen = np.full(n_pts, -1)
    dist = np.zeros(n_pts)
    var = np.zeros(n_pts)
    plane_of: dict[int, PlaneFeature] = {}
    n_out = np.zeros((n_pts, 3))
    q_out = np.zeros((n_pts, 3))
    c_out = np.zeros((n_pts, 6, 6))
    for key, idx in group_by_key(hash_keys(points, vmap.config.voxel_size)):
        cands = [vmap.root_planes(k) for k in vmap.candidate_keys(key)]
        cands = [c for c in cands if c.planes]
        if not cands:
            continue
        planes = [pl for c in cands for pl in c.planes]
        N = np.concatenate([c.n for c in cands])
        Q = np.concatenate([c.q for c in cands])
        C = np.concatenate([c.cov for c in cands])
        rad = np.concatenate([c.radius for c in cands])
        P = points[idx]
        diff = P[:, None, :] - Q[None, :, :]  # (m, k, 3)
        d = np.einsum("mkj,kj->mk", diff, N)
        lateral2 = np.einsum("mkj,mkj->mk", diff, diff) - d * d
        J = np.concatenate([diff, np.broadcast_to(-N, diff.shape)], axis=-1)  # (m, k, 6)
        v = np.einsum("mki,kij,mkj->mk", J, C, J)
        v += np.einsum("ki,mij,kj->mk", N, covs[idx], N)
        v = np.maximum(v, VARIANCE_FLOOR)
        ok = (np.abs(d) <= GATE_SIGMAS * np.sqrt(v)) & (lateral2 <= (EXTENT_RADII * rad) ** 2)
        score = np.where(ok, _score(d, v), np.inf)
        best = np.argmin(score, axis=1)
        rows = np.arange(len(idx))
        hit = ok[rows, best]
        sel = idx[hit]
        b = best[hit]
        chosen[sel] = 1
        dist[sel] = d[rows[hit], b]
        var[sel] = v[rows[hit], b]
        n_out[sel] = N[b]
        q_out[sel] = Q[b]
        c_out[sel] = C[b]
        for i, k in zip(sel, b):
            plane_of[int(i)] = planes[k]
    keep = np.flatnonzero(chosen >= 0)
    return MatchArrays(
        keep,
        n_out[keep],
        q_out[keep],
        c_out[keep],
        dist[keep],
        var[keep],
        [plane_of[int(i)] for i in keep],
    )


def match_scan(points, covs=None, vmap: VoxelMap | None = None) -> list[Match]:
    """Match every point of a scan; unmatched points are dropped, order kept.

    ``points`` may be a list of :class:`WorldPoint` (with ``covs`` omitted) or
    an ``(N, 3)`` array with ``(N, 3, 3)`` covariances.
    """
    if vmap is None:
        raise TypeError("match_scan requires a map")
    if covs is None:
        pts = list(points)
        P = np.array([wp.p for wp in pts], dtype=float).reshape(-1, 3)
        C = np.array([wp.cov for wp in pts], dtype=float).reshape(-1, 3, 3)
    else:
        P = np.asarray(points, dtype=float).reshape(-1, 3)
        C = np.asarray(covs, dtype=float).reshape(-1, 3, 3)
    res = match_arrays(P, C, vmap)
    return [
        Match(
            WorldPoint(P[i], C[i]),
            res.planes[j],
            float(res.distance[j]),
            float(res.variance[j]),
            index=int(i),
            floored=bool(res.variance[j] <= VARIANCE_FLOOR),
        )
        for j, i in enumerate(res.index)
    ]


def voxel_downsample(points: np.ndarray, leaf: float) -> np.ndarray:
    """Indices of the first point falling into each ``leaf``-sized grid cell."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0 or leaf <= 0:
        return np.arange(len(points))
    cells = np.floor(points / leaf).astype(np.int64)
    _, first = np.unique(cells, axis=0, return_index=True)
    return np.sort(first)
