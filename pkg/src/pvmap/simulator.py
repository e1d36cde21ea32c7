"""Synthetic planar scenes, ray-cast LiDAR scans and Monte-Carlo oracles.

All randomness goes through ``numpy.random.Generator(PCG64(seed))`` so every
scan and oracle value is reproducible from its integer seed. Per-trial seeds
are derived with ``SeedSequence([seed, trial])``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import Pose, so3_exp, so3_exp_batch
from .plane import fit_plane
from .uncertainty import SensorNoise, tangent_basis_batch


def rng_for(seed: int, *stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *stream])))


@dataclass(frozen=True)
class Patch:
    """Parallelogram ``corner + a*e1 + b*e2`` with ``a, b`` in [0, 1]."""

    corner: np.ndarray
    e1: np.ndarray
    e2: np.ndarray

    def __post_init__(self):
        for name in ("corner", "e1", "e2"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))
        if self.area <= 0.0:
            raise ValueError("degenerate patch")

    @property
    def normal(self) -> np.ndarray:
        c = np.cross(self.e1, self.e2)
        return c / np.linalg.norm(c)

    @property
    def center(self) -> np.ndarray:
        return self.corner + 0.5 * (self.e1 + self.e2)

    @property
    def area(self) -> float:
        return float(np.linalg.norm(np.cross(self.e1, self.e2)))

    def corners(self) -> np.ndarray:
        c = self.corner
        return np.array([c, c + self.e1, c + self.e1 + self.e2, c + self.e2])

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        ab = rng.uniform(size=(n, 2))
        return self.corner + ab[:, :1] * self.e1 + ab[:, 1:] * self.e2


@dataclass
class Scene:
    patches: list[Patch]
    name: str = "scene"

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        pts = np.vstack([p.corners() for p in self.patches])
        return pts.min(axis=0), pts.max(axis=0)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(f"# pvmap scene {self.name}: one patch per line, 4 corners x y z in order\n")
            for p in self.patches:
                fh.write(" ".join(f"{v:.17g}" for v in p.corners().ravel()) + "\n")

    @classmethod
    def load(cls, path) -> "Scene":
        patches = []
        name = "scene"
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if line.startswith("# pvmap scene"):
                    name = line.split()[3].rstrip(":")
                if not line or line.startswith("#"):
                    continue
                v = np.array([float(x) for x in line.split()])
                if v.size != 12:
                    raise ValueError(f"{path}:{lineno}: expected 12 numbers, got {v.size}")
                c = v.reshape(4, 3)
                e1, e2 = c[1] - c[0], c[3] - c[0]
                if np.abs(c[0] + e1 + e2 - c[2]).max() > 1e-9 * max(1.0, np.abs(c).max()):
                    raise ValueError(f"{path}:{lineno}: corners do not form a parallelogram")
                patches.append(Patch(c[0], e1, e2))
        return cls(patches, name)


def box_patches(lo, hi) -> list[Patch]:
    """The six outward faces of an axis-aligned box."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    dx, dy, dz = np.diag(hi - lo)
    return [
        Patch(lo, dz, dy),  # -x
        Patch(lo + dx, dy, dz),  # +x
        Patch(lo, dx, dz),  # -y
        Patch(lo + dy, dz, dx),  # +y
        Patch(lo, dy, dx),  # -z
        Patch(lo + dz, dx, dy),  # +z
    ]


def single_wall(distance: float = 10.0, width: float = 20.0, height: float = 10.0) -> Scene:
    c = np.array([distance, -width / 2, -height / 2])
    return Scene([Patch(c, [0, width, 0], [0, 0, height])], "wall")


def room(size=(12.0, 10.0, 4.0), center=(0.0, 0.0, 1.0)) -> Scene:
    half = np.asarray(size) / 2
    c = np.asarray(center, dtype=float)
    return Scene(box_patches(c - half, c + half), "room")


def corridor_with_boxes(
    length: float = 40.0,
    width: float = 6.0,
    height: float = 3.5,
    seed: int = 7,
    pillar_gap: float = 3.0,
    pillar: float = 0.6,
) -> Scene:
    """Closed corridor along +x with wall pillars and boxes of several sizes.

    The pillars break the translational symmetry along the corridor axis;
    the boxes give small planes that force octree subdivision.
    """
    lo = np.array([-5.0, -width / 2, -1.2])
    hi = np.array([length, width / 2, height - 1.2])
    patches = box_patches(lo, hi)
    x = lo[0] + 1.5
    while x < hi[0] - 1.0:
        for y0 in (lo[1], hi[1] - pillar):
            patches += box_patches([x, y0, lo[2]], [x + pillar, y0 + pillar, hi[2]])
        x += pillar_gap
    rng = rng_for(seed)
    x = lo[0] + 2.0
    side = 1
    while x < hi[0] - 3.0:
        sx, sy, sz = rng.uniform([0.4, 0.4, 0.4], [1.5, 1.2, 1.8])
        # Boxes stand in front of the walls and leave the centre lane clear.
        y0 = hi[1] - pillar - sy if side > 0 else lo[1] + pillar
        patches += box_patches([x, y0, lo[2]], [x + sx, y0 + sy, lo[2] + sz])
        x += sx + rng.uniform(1.5, 3.5)
        side = -side
    return Scene(patches, "corridor")


def sparse_forest(extent: float = 30.0, trees: int = 60, seed: int = 11) -> Scene:
    """Ground plane plus narrow vertical slabs standing in for trunks."""
    rng = rng_for(seed)
    patches = [Patch([-extent, -extent, -1.5], [2 * extent, 0, 0], [0, 2 * extent, 0])]
    for _ in range(trees):
        xy = rng.uniform(-extent + 2, extent - 2, size=2)
        if np.linalg.norm(xy) < 3.0:
            continue
        w = rng.uniform(0.2, 0.5)
        heading = rng.uniform(0, np.pi)
        d = np.array([np.cos(heading), np.sin(heading), 0.0]) * w
        patches += [Patch([xy[0], xy[1], -1.5], d, [0, 0, rng.uniform(3, 8)])]
    return Scene(patches, "forest")


SCENES = {
    "wall": single_wall,
    "room": room,
    "corridor": corridor_with_boxes,
    "forest": sparse_forest,
}


# ------------------------------------------------------------------ patterns


@dataclass(frozen=True)
class SphericalPattern:
    """Spinning-LiDAR grid of azimuth x elevation beams."""

    azimuths: int = 720
    elevations: int = 16
    min_elevation: float = float(np.deg2rad(-15.0))
    max_elevation: float = float(np.deg2rad(15.0))

    def directions(self, rng=None) -> np.ndarray:
        az = np.linspace(-np.pi, np.pi, self.azimuths, endpoint=False)
        el = np.linspace(self.min_elevation, self.max_elevation, self.elevations)
        A, E = np.meshgrid(az, el)
        return np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1).reshape(-1, 3)


@dataclass(frozen=True)
class RosettePattern:
    """Non-repetitive forward-looking pattern: a rose curve that slowly precesses.

    The accumulated sampling densifies with ``points`` (sparse to dense within
    a scan) instead of repeating fixed lines.
    """

    points: int = 10000
    fov: float = float(np.deg2rad(70.0))
    petals: float = 7.0
    turns: float = 53.3

    def directions(self, rng=None) -> np.ndarray:
        s = np.linspace(0.0, 1.0, self.points, endpoint=False)
        phase = 2 * np.pi * self.turns * s
        r = 0.5 * self.fov * np.abs(np.sin(self.petals * phase / 2))
        rot = 2 * np.pi * s * 3.1
        x = np.cos(r)
        y = np.sin(r) * np.cos(phase + rot)
        z = np.sin(r) * np.sin(phase + rot)
        d = np.stack([x, y, z], axis=-1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)


# --------------------------------------------------------------------- scans


@dataclass
class SimScan:
    omega: np.ndarray  # (N, 3) local unit bearings
    depth: np.ndarray  # (N,)
    patch_id: np.ndarray  # (N,) index into scene.patches
    clean_points: np.ndarray  # (N, 3) noiseless local points
    pose: Pose = field(default_factory=Pose)

    def __len__(self) -> int:
        return len(self.depth)

    @property
    def local_points(self) -> np.ndarray:
        return self.omega * self.depth[:, None]

    def world_points(self) -> np.ndarray:
        return self.pose.transform(self.local_points)


def raycast(
    scene: Scene,
    pose: Pose,
    pattern=None,
    max_range: float = 60.0,
    min_range: float = 0.3,
    chunk: int = 4096,
) -> SimScan:
    """First-hit ray casting of ``pattern`` from ``pose`` into ``scene``."""
    pattern = pattern or SphericalPattern()
    dirs_local = pattern.directions()
    dirs = dirs_local @ pose.R.T
    origin = pose.t
    corners = np.array([p.corner for p in scene.patches])
    E1 = np.array([p.e1 for p in scene.patches])
    E2 = np.array([p.e2 for p in scene.patches])
    normals = np.cross(E1, E2)
    # Solve corner + a e1 + b e2 = o + s d with Cramer's rule per (ray, patch).
    G11 = np.einsum("ki,ki->k", E1, E1)
    G12 = np.einsum("ki,ki->k", E1, E2)
    G22 = np.einsum("ki,ki->k", E2, E2)
    det = G11 * G22 - G12**2
    rel = origin - corners  # (k, 3)
    num = np.einsum("ki,ki->k", normals, -rel)
    best_s = np.full(len(dirs), np.inf)
    best_k = np.full(len(dirs), -1)
    for start in range(0, len(dirs), chunk):
        D = dirs[start : start + chunk]
        den = D @ normals.T  # (m, k)
        with np.errstate(divide="ignore", invalid="ignore"):
            s = num[None, :] / den
        s = np.where(np.abs(den) > 1e-12, s, np.inf)
        s = np.where(s > min_range, s, np.inf)
        s = np.where(s <= max_range, s, np.inf)
        hit = rel[None, :, :] + np.where(np.isfinite(s), s, 0.0)[..., None] * D[:, None, :]
        h1 = np.einsum("mki,ki->mk", hit, E1)
        h2 = np.einsum("mki,ki->mk", hit, E2)
        a = (G22 * h1 - G12 * h2) / det
        b = (G11 * h2 - G12 * h1) / det
        inside = (a >= 0) & (a <= 1) & (b >= 0) & (b <= 1)
        s = np.where(inside, s, np.inf)
        k = np.argmin(s, axis=1)
        sm = s[np.arange(len(D)), k]
        best_s[start : start + chunk] = sm
        best_k[start : start + chunk] = np.where(np.isfinite(sm), k, -1)
    ok = best_k >= 0
    depth = best_s[ok]
    omega = dirs_local[ok]
    return SimScan(omega, depth, best_k[ok], omega * depth[:, None], Pose(pose.R, pose.t))


def corrupt(scan: SimScan, noise: SensorNoise, seed: int) -> SimScan:
    """Sample ranging and bearing noise per the measurement model.

    ``d <- d + delta_d`` and ``omega <- exp([N(omega) delta_omega]x) omega``.
    """
    rng = rng_for(seed, 1)
    n = len(scan)
    dd = rng.standard_normal(n) * noise.sigma_d
    z = rng.standard_normal((n, 2))
    if noise.cov_omega is None:
        dw = z * noise.sigma_omega
    else:
        dw = z @ np.linalg.cholesky(noise.bearing_cov()).T
    if n == 0:
        return SimScan(scan.omega.copy(), scan.depth.copy(), scan.patch_id.copy(), scan.clean_points.copy(), scan.pose)
    rotvec = np.einsum("nij,nj->ni", tangent_basis_batch(scan.omega), dw)
    omega = np.einsum("nij,nj->ni", so3_exp_batch(rotvec), scan.omega)
    omega /= np.linalg.norm(omega, axis=1, keepdims=True)
    depth = np.maximum(scan.depth + dd, 0.0)
    return SimScan(omega, depth, scan.patch_id.copy(), scan.clean_points.copy(), scan.pose)


def simulate_scan(scene, pose, noise: SensorNoise, seed: int, pattern=None, max_range: float = 60.0) -> SimScan:
    return corrupt(raycast(scene, pose, pattern, max_range), noise, seed)


# --------------------------------------------------------------- trajectories


def make_trajectory(kind: str, frames: int, speed: float = 0.1, radius: float = 3.0, yaw_rate: float = np.deg2rad(5.0), start=None) -> list[Pose]:
    """Ground-truth sensor poses.

    ``static``: constant pose; ``corridor``: straight line along +x at
    ``speed`` m/frame; ``loop``: circle of ``radius`` traversed once so the
    last pose equals the first; ``rotation``: yaw in place at ``yaw_rate``.
    """
    start = np.zeros(3) if start is None else np.asarray(start, dtype=float)
    poses = []
    for k in range(frames):
        if kind == "static":
            poses.append(Pose(np.eye(3), start.copy()))
        elif kind == "corridor":
            poses.append(Pose(np.eye(3), start + [k * speed, 0.0, 0.0]))
        elif kind == "loop":
            a = 2 * np.pi * k / max(frames - 1, 1)
            # Heading tangent to the circle; position starts at `start`.
            t = start + radius * np.array([np.sin(a), 1.0 - np.cos(a), 0.0])
            if k == frames - 1:
                a, t = 0.0, start.copy()
            poses.append(Pose(so3_exp([0.0, 0.0, a]), t))
        elif kind == "rotation":
            poses.append(Pose(so3_exp([0.0, 0.0, k * yaw_rate]), start.copy()))
        else:
            raise ValueError(f"unknown trajectory kind {kind!r}")
    return poses


# ------------------------------------------------------------------- oracles


def sample_covariance(X: np.ndarray) -> np.ndarray:
    D = X - X.mean(axis=0)
    return D.T @ D / (len(X) - 1)


def mc_plane_cov_oracle(
    patch: Patch,
    N: int,
    point_var: float,
    trials: int,
    seed: int,
    points: np.ndarray | None = None,
) -> np.ndarray:
    """Empirical 6x6 covariance of the refitted ``(n, q)``.

    ``N`` noiseless points are drawn once on the patch (or taken from
    ``points``); every trial adds isotropic noise of variance ``point_var``
    and refits. Normals are kept in the hemisphere of the patch normal.
    """
    if trials < 1000:
        raise ValueError("use at least 1000 trials")
    clean = patch.sample(N, rng_for(seed, 0)) if points is None else np.asarray(points, dtype=float)
    ref = patch.normal
    out = np.empty((trials, 6))
    rng = rng_for(seed, 1)
    sd = np.sqrt(point_var)
    for i in range(trials):
        fit = fit_plane(clean + sd * rng.standard_normal(clean.shape))
        n = fit.U[:, 2]
        if n @ ref < 0:
            n = -n
        out[i, :3] = n
        out[i, 3:] = fit.q
    return sample_covariance(out)


def patches_in_box(scene: Scene, lo, hi, resolution: float = 0.02) -> set[int]:
    """Patch ids with any surface inside the axis-aligned box (sampled test)."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    out = set()
    for i, p in enumerate(scene.patches):
        na = max(2, int(np.ceil(np.linalg.norm(p.e1) / resolution)) + 1)
        nb = max(2, int(np.ceil(np.linalg.norm(p.e2) / resolution)) + 1)
        # Reject quickly on the patch bounding box.
        c = p.corners()
        if np.any(c.max(axis=0) < lo) or np.any(c.min(axis=0) >= hi):
            continue
        a = np.linspace(0, 1, na)
        b = np.linspace(0, 1, nb)
        A, B = np.meshgrid(a, b)
        pts = p.corner + A.reshape(-1, 1) * p.e1 + B.reshape(-1, 1) * p.e2
        if np.any(np.all((pts >= lo) & (pts < hi), axis=1)):
            out.add(i)
    return out
