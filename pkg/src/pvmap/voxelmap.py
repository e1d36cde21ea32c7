"""Coarse-to-fine adaptive voxel map: a hash table of root voxels, each an octree.

Nodes start as point buffers, become planes when the points are flat enough
(smallest scatter eigenvalue below ``plane_threshold``), and split into eight
octants otherwise until ``max_layer`` is reached. Incremental updates refit
unconverged planes, freeze them once ``n_conv`` points have been seen, and
watch converged planes for persistent changes of the normal.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .plane import (
    DegeneratePlaneError,
    PlaneFeature,
    fit_plane,
    orient_normal,
    plane_cov,
    plane_jacobians,
)

_KEY_BITS = 21
_KEY_OFFSET = 1 << (_KEY_BITS - 1)


class InvalidPointError(ValueError):
    pass


@dataclass
class UpdateConfig:
    n_conv: int = 50
    k_recent: int = 10
    rebuild_angle: float = float(np.deg2rad(10.0))
    rebuild_patience: int = 3
    max_points: int = 1000

    def __post_init__(self):
        if self.k_recent < 3:
            raise ValueError("k_recent must be at least 3")
        if self.n_conv <= self.k_recent:
            raise ValueError("n_conv must exceed k_recent")
        if self.rebuild_angle <= 0 or self.rebuild_patience < 1 or self.max_points < 3:
            raise ValueError("invalid update thresholds")


@dataclass
class MapConfig:
    voxel_size: float = 2.0
    max_layer: int = 3
    plane_threshold: float = 0.01
    min_points: int = 10
    query_adjacent: bool = False
    update: UpdateConfig = field(default_factory=UpdateConfig)

    def __post_init__(self):
        if self.voxel_size <= 0 or self.max_layer < 1 or self.plane_threshold <= 0:
            raise ValueError("voxel_size, max_layer and plane_threshold must be positive")
        if self.min_points < 3:
            raise ValueError("min_points must be at least 3")

    def layer_size(self, layer: int) -> float:
        return self.voxel_size / 2 ** (layer - 1)


def hash_key(p, voxel_size: float) -> tuple[int, int, int]:
    """Integer lattice coordinates of the root voxel containing ``p``."""
    p = np.asarray(p, dtype=float)
    if not np.all(np.isfinite(p)):
        raise InvalidPointError(f"non-finite point {p}")
    k = np.floor(p / voxel_size).astype(np.int64)
    return int(k[0]), int(k[1]), int(k[2])


def hash_keys(points: np.ndarray, voxel_size: float) -> np.ndarray:
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if not np.all(np.isfinite(points)):
        raise InvalidPointError("non-finite coordinates in point batch")
    return np.floor(points / voxel_size).astype(np.int64)


def group_by_key(keys: np.ndarray) -> list[tuple[tuple[int, int, int], np.ndarray]]:
    """Group row indices by key, ordered by first appearance."""
    if len(keys) == 0:
        return []
    if np.abs(keys).max() < _KEY_OFFSET:
        k = keys + _KEY_OFFSET
        code = (k[:, 0] << (2 * _KEY_BITS)) | (k[:, 1] << _KEY_BITS) | k[:, 2]
        _, first, inverse = np.unique(code, return_index=True, return_inverse=True)
    else:
        _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(inverse, kind="stable")
    bounds = np.searchsorted(inverse[order], np.arange(len(first) + 1))
    groups = []
    for g in np.argsort(first, kind="stable"):
        idx = order[bounds[g] : bounds[g + 1]]
        groups.append((tuple(int(v) for v in keys[idx[0]]), idx))
    return groups


class NodeState(enum.Enum):
    POINTS = "points"  # too few points to judge planarity
    PLANE = "plane"
    CHILDREN = "children"
    EXHAUSTED = "exhausted"  # non-planar at the deepest layer


class OctreeNode:
    __slots__ = (
        "layer",
        "center",
        "half",
        "state",
        "points",
        "covs",
        "plane",
        "children",
        "recent",
        "violations",
    )

    def __init__(self, layer: int, center: np.ndarray, half: float):
        self.layer = layer
        self.center = np.asarray(center, dtype=float)
        self.half = float(half)
        self.state = NodeState.POINTS
        self.points = np.empty((0, 3))
        self.covs = np.empty((0, 3, 3))
        self.plane: PlaneFeature | None = None
        self.children: list[OctreeNode | None] | None = None
        self.recent: deque = deque()
        self.violations = 0

    @property
    def size(self) -> float:
        return 2.0 * self.half

    @property
    def lower(self) -> np.ndarray:
        return self.center - self.half

    @property
    def upper(self) -> np.ndarray:
        return self.center + self.half

    @property
    def converged(self) -> bool:
        return self.plane is not None and self.plane.converged

    def octants(self, points: np.ndarray) -> np.ndarray:
        ge = points >= self.center
        return ge[:, 0] * 1 + ge[:, 1] * 2 + ge[:, 2] * 4

    def walk(self):
        yield self
        if self.children is not None:
            for child in self.children:
                if child is not None:
                    yield from child.walk()


@dataclass
class InsertReport:
    points: int = 0
    new_roots: int = 0
    refits: int = 0
    converged: int = 0
    restructured: int = 0
    rebuilt: int = 0


@dataclass
class MapStats:
    planes_by_size: dict[float, int]
    roots: int
    nodes: int
    points_stored: int
    converged_planes: int
    undecided_nodes: int
    exhausted_nodes: int

    @property
    def planes(self) -> int:
        return sum(self.planes_by_size.values())


@dataclass
class RootPlanes:
    """Planes of one root stacked for vectorised matching."""

    planes: list[PlaneFeature]
    n: np.ndarray
    q: np.ndarray
    cov: np.ndarray
    radius: np.ndarray


_EMPTY_ROOT = RootPlanes([], np.empty((0, 3)), np.empty((0, 3)), np.empty((0, 6, 6)), np.empty(0))


class VoxelMap:
    """Hash table of octree roots keyed by ``floor(p / voxel_size)``.

    Writers (``insert``/``build``) need exclusive access; readers
    (``query``/``stats``) may share the map between themselves.
    """

    def __init__(self, config: MapConfig | None = None):
        self.config = config or MapConfig()
        self.roots: dict[tuple[int, int, int], OctreeNode] = {}
        self._cache: dict[tuple[int, int, int], RootPlanes] = {}

    def __len__(self) -> int:
        return len(self.roots)

    @classmethod
    def build(cls, points, covs=None, config: MapConfig | None = None, viewpoint=None) -> "VoxelMap":
        vmap = cls(config)
        vmap.insert(points, covs, viewpoint)
        return vmap

    # ------------------------------------------------------------------ update

    def insert(self, points, covs=None, viewpoint=None) -> InsertReport:
        """Add registered world points (with covariances) to the map."""
        P, C = _as_arrays(points, covs)
        viewpoint = np.zeros(3) if viewpoint is None else np.asarray(viewpoint, dtype=float)
        report = InsertReport(points=len(P))
        V = self.config.voxel_size
        for key, idx in group_by_key(hash_keys(P, V)):
            root = self.roots.get(key)
            if root is None:
                root = OctreeNode(1, (np.array(key) + 0.5) * V, 0.5 * V)
                self.roots[key] = root
                report.new_roots += 1
                self._construct(root, P[idx], C[idx], viewpoint, report)
            else:
                self._update(root, P[idx], C[idx], viewpoint, report)
            self._cache.pop(key, None)
        return report

    def _try_plane(self, pts, covs, viewpoint, reference=None) -> PlaneFeature | None:
        fit = fit_plane(pts)
        if not fit.lam3 < self.config.plane_threshold:
            return None
        if reference is None:
            n = orient_normal(fit, viewpoint)
        else:
            n = fit.U[:, 2] * (1.0 if np.dot(fit.U[:, 2], reference) >= 0.0 else -1.0)
        try:
            J = plane_jacobians(fit, n)
        except DegeneratePlaneError:
            return None
        return PlaneFeature(n, fit.q, plane_cov(fit, J, covs), fit.lam3, fit.N, radius=float(np.sqrt(fit.lam[0])))

    def _cap(self, pts, covs):
        m = self.config.update.max_points
        if len(pts) <= m:
            return pts, covs
        keep = np.unique(np.linspace(0, len(pts) - 1, m).round().astype(int))
        return pts[keep], covs[keep]

    def _set_plane(self, node, feature, pts, covs, report) -> None:
        node.state = NodeState.PLANE
        if len(pts) >= self.config.update.n_conv:
            # Parameters have settled: keep (n, q, cov) and drop the history.
            node.plane = replace(feature, converged=True)
            node.points = np.empty((0, 3))
            node.covs = np.empty((0, 3, 3))
            report.converged += 1
        else:
            node.plane = feature
            node.points, node.covs = pts, covs

    def _construct(self, node, pts, covs, viewpoint, report) -> None:
        cfg = self.config
        node.children = None
        node.plane = None
        node.recent = deque(maxlen=cfg.update.k_recent)
        node.violations = 0
        if len(pts) < cfg.min_points:
            node.state = NodeState.POINTS
            node.points, node.covs = pts, covs
            return
        feature = self._try_plane(pts, covs, viewpoint)
        if feature is not None:
            self._set_plane(node, feature, pts, covs, report)
            return
        if node.layer < cfg.max_layer:
            node.state = NodeState.CHILDREN
            node.points = np.empty((0, 3))
            node.covs = np.empty((0, 3, 3))
            node.children = [None] * 8
            self._distribute(node, pts, covs, viewpoint, report)
            return
        node.state = NodeState.EXHAUSTED
        node.points, node.covs = self._cap(pts, covs)

    def _distribute(self, node, pts, covs, viewpoint, report) -> None:
        octs = node.octants(pts)
        quarter = 0.5 * node.half
        for o in range(8):
            mask = octs == o
            if not mask.any():
                continue
            child = node.children[o]
            if child is None:
                sign = np.array([1.0 if o & b else -1.0 for b in (1, 2, 4)])
                child = OctreeNode(node.layer + 1, node.center + quarter * sign, quarter)
                node.children[o] = child
                self._construct(child, pts[mask], covs[mask], viewpoint, report)
            else:
                self._update(child, pts[mask], covs[mask], viewpoint, report)

    def _update(self, node, pts, covs, viewpoint, report) -> None:
        upd = self.config.update
        if node.state is NodeState.CHILDREN:
            self._distribute(node, pts, covs, viewpoint, report)
            return
        if node.state is not NodeState.PLANE:
            allp, allc = self._cap(np.vstack([node.points, pts]), np.concatenate([node.covs, covs]))
            self._construct(node, allp, allc, viewpoint, report)
            return
        if not node.plane.converged:
            allp = np.vstack([node.points, pts])
            allc = np.concatenate([node.covs, covs])
            feature = self._try_plane(allp, allc, viewpoint, reference=node.plane.n)
            report.refits += 1
            if feature is None:
                report.restructured += 1
                self._construct(node, *self._cap(allp, allc), viewpoint, report)
            else:
                self._set_plane(node, feature, allp, allc, report)
            return
        node.recent.extend(zip(pts, covs))
        if len(node.recent) < upd.k_recent:
            return
        recent = np.array([p for p, _ in node.recent])
        fit = fit_plane(recent)
        angle = np.arccos(min(1.0, abs(float(np.dot(fit.U[:, 2], node.plane.n)))))
        node.violations = node.violations + 1 if angle > upd.rebuild_angle else 0
        if node.violations >= upd.rebuild_patience:
            report.rebuilt += 1
            rc = np.array([c for _, c in node.recent])
            self._construct(node, recent, rc, viewpoint, report)

    # ------------------------------------------------------------------- read

    def root_planes(self, key) -> RootPlanes:
        key = tuple(int(k) for k in key)
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        root = self.roots.get(key)
        if root is None:
            return _EMPTY_ROOT
        planes = [node.plane for node in root.walk() if node.plane is not None]
        if planes:
            entry = RootPlanes(
                planes,
                np.array([pl.n for pl in planes]),
                np.array([pl.q for pl in planes]),
                np.array([pl.cov for pl in planes]),
                np.array([pl.radius for pl in planes]),
            )
        else:
            entry = _EMPTY_ROOT
        self._cache[key] = entry
        return entry

    def candidate_keys(self, key) -> list[tuple[int, int, int]]:
        keys = [tuple(key)]
        if self.config.query_adjacent:
            kx, ky, kz = key
            for d in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                keys.append((kx + d[0], ky + d[1], kz + d[2]))
        return keys

    def query(self, p) -> list[PlaneFeature]:
        """All planes stored in the root voxel containing ``p``."""
        key = hash_key(p, self.config.voxel_size)
        out: list[PlaneFeature] = []
        for k in self.candidate_keys(key):
            out.extend(self.root_planes(k).planes)
        return out

    def nodes(self):
        """``(key, node)`` pairs in sorted-key, depth-first order."""
        for key in sorted(self.roots):
            for node in self.roots[key].walk():
                yield key, node

    def planes(self):
        for key, node in self.nodes():
            if node.plane is not None:
                yield key, node

    def stats(self) -> MapStats:
        by_size: dict[float, int] = {}
        nodes = points = conv = undecided = exhausted = 0
        for _, node in self.nodes():
            nodes += 1
            points += len(node.points)
            if node.plane is not None:
                size = self.config.layer_size(node.layer)
                by_size[size] = by_size.get(size, 0) + 1
                conv += node.plane.converged
            elif node.state is NodeState.POINTS:
                undecided += 1
            elif node.state is NodeState.EXHAUSTED:
                exhausted += 1
        return MapStats(
            dict(sorted(by_size.items(), reverse=True)),
            len(self.roots),
            nodes,
            points,
            conv,
            undecided,
            exhausted,
        )

    def dump(self, fh) -> int:
        """Write one line per plane; returns the number of planes written.

        Columns: layer, voxel center (3), normal (3), plane point (3), smallest
        eigenvalue, trace of the normal covariance block, converged flag.
        """
        fh.write(DUMP_HEADER + "\n")
        count = 0
        for _, node in self.planes():
            pl = node.plane
            vals = [*node.center, *pl.n, *pl.q, pl.lam3, pl.normal_trace()]
            fh.write(f"{node.layer} " + " ".join(f"{v:.9g}" for v in vals) + f" {int(pl.converged)}\n")
            count += 1
        return count


DUMP_HEADER = "# layer cx cy cz nx ny nz qx qy qz lambda3 trace_normal_cov converged"


def read_dump(fh) -> list[dict]:
    rows = []
    for line in fh:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        f = line.split()
        if len(f) != 13:
            raise ValueError(f"malformed map dump line: {line!r}")
        v = [float(x) for x in f[1:12]]
        rows.append(
            {
                "layer": int(f[0]),
                "center": np.array(v[0:3]),
                "n": np.array(v[3:6]),
                "q": np.array(v[6:9]),
                "lambda3": v[9],
                "trace_normal_cov": v[10],
                "converged": bool(int(f[12])),
            }
        )
    return rows


def _as_arrays(points, covs):
    if covs is None:
        pts = list(points)
        if pts and hasattr(pts[0], "cov"):
            return (
                np.array([wp.p for wp in pts], dtype=float).reshape(-1, 3),
                np.array([wp.cov for wp in pts], dtype=float).reshape(-1, 3, 3),
            )
        P = np.asarray(pts, dtype=float).reshape(-1, 3)
        return P, np.zeros((len(P), 3, 3))
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    C = np.asarray(covs, dtype=float).reshape(-1, 3, 3)
    if len(C) != len(P):
        raise ValueError("points and covariances differ in length")
    return P, C
