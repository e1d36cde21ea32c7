"""Scan and trajectory files.

Scan formats
------------
``kitti-bin``
    little-endian float32 records ``x y z intensity`` (16 bytes each).
``ply-ascii``
    ASCII PLY with ``x y z`` among the vertex properties.
``sim``
    text, one return per line: ``ox oy oz depth patch_id`` with the unit
    bearing written at full precision; ``#`` lines are comments.

Pose files hold one KITTI row per frame (the 3x4 matrix ``[R | t]`` row-major,
12 numbers), optionally preceded by a timestamp (13 numbers). Lines starting
with ``#`` are comments; the odometry run uses them to echo its config.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..geom import Pose, project_to_rotation


class ScanParseError(ValueError):
    """Malformed scan file."""


class UnknownFormatError(ValueError):
    """Scan format name not recognised."""


@dataclass
class Scan:
    """Bearings ``(N, 3)`` and depths ``(N,)`` of one frame."""

    omega: np.ndarray
    depth: np.ndarray
    patch_id: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.depth)

    @property
    def points(self) -> np.ndarray:
        return self.omega * self.depth[:, None]

    @classmethod
    def from_points(cls, points, patch_id=None) -> "Scan":
        """Cartesian points to ``(omega, d)``; zero-range points are dropped."""
        P = np.asarray(points, dtype=float).reshape(-1, 3)
        d = np.linalg.norm(P, axis=1)
        keep = d > 0
        pid = None if patch_id is None else np.asarray(patch_id)[keep]
        return cls(P[keep] / d[keep, None], d[keep], pid)


def load_scan(path, fmt: str) -> Scan:
    if fmt == "kitti-bin":
        return _load_kitti_bin(path)
    if fmt == "ply-ascii":
        return _load_ply_ascii(path)
    if fmt == "sim":
        return _load_sim(path)
    raise UnknownFormatError(f"unknown scan format {fmt!r}")


def _load_kitti_bin(path) -> Scan:
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        full = len(raw) // 16 * 16
        raise ScanParseError(f"{path}: truncated record at byte offset {full} (file size {len(raw)} is not a multiple of 16)")
    rec = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    return Scan.from_points(rec[:, :3].astype(float))


def _load_ply_ascii(path) -> Scan:
    with open(path, "rb") as fh:
        data = fh.read()
    offset = 0
    lines = data.split(b"\n")
    if lines and not lines[-1].strip():
        lines.pop()  # final newline
    if not lines or lines[0].strip() != b"ply":
        raise ScanParseError(f"{path}: missing 'ply' magic at byte offset 0")
    n_vertex = None
    props: list[str] = []
    in_vertex = False
    body = None
    for i, line in enumerate(lines):
        text = line.decode("ascii", errors="replace").strip()
        start = offset
        offset += len(line) + 1
        if i == 0:
            continue
        f = text.split()
        if not f or f[0] == "comment":
            continue
        if f[0] == "format":
            if len(f) < 2 or f[1] != "ascii":
                raise ScanParseError(f"{path}: only ASCII PLY is supported (byte offset {start})")
        elif f[0] == "element":
            in_vertex = len(f) == 3 and f[1] == "vertex"
            if in_vertex:
                n_vertex = int(f[2])
        elif f[0] == "property" and in_vertex:
            props.append(f[-1])
        elif f[0] == "end_header":
            body = i + 1
            break
    if body is None or n_vertex is None:
        raise ScanParseError(f"{path}: incomplete PLY header")
    try:
        cols = [props.index(c) for c in "xyz"]
    except ValueError:
        raise ScanParseError(f"{path}: vertex element lacks x/y/z properties") from None
    pts = np.empty((n_vertex, 3))
    for k in range(n_vertex):
        if body + k >= len(lines):
            raise ScanParseError(f"{path}: expected {n_vertex} vertices, file ends at byte offset {len(data)}")
        f = lines[body + k].split()
        if len(f) != len(props):
            raise ScanParseError(f"{path}: vertex {k} has {len(f)} fields, expected {len(props)} (byte offset {offset})")
        try:
            pts[k] = [float(f[c]) for c in cols]
        except ValueError:
            raise ScanParseError(f"{path}: non-numeric vertex field at byte offset {offset}") from None
        offset += len(lines[body + k]) + 1
    return Scan.from_points(pts)


def _load_sim(path) -> Scan:
    rows = []
    offset = 0
    with open(path, "rb") as fh:
        for line in fh:
            text = line.strip()
            if text and not text.startswith(b"#"):
                f = text.split()
                if len(f) != 5:
                    raise ScanParseError(f"{path}: expected 5 fields at byte offset {offset}, got {len(f)}")
                try:
                    rows.append([float(v) for v in f])
                except ValueError:
                    raise ScanParseError(f"{path}: non-numeric field at byte offset {offset}") from None
            offset += len(line)
    if not rows:
        return Scan(np.empty((0, 3)), np.empty(0), np.empty(0, dtype=int))
    a = np.array(rows)
    keep = a[:, 3] > 0
    return Scan(a[keep, :3], a[keep, 3], a[keep, 4].astype(int))


def save_scan(path, scan, fmt: str = "sim") -> None:
    """Write ``scan`` (anything with ``omega``, ``depth``) in ``fmt``."""
    omega = np.asarray(scan.omega, dtype=float).reshape(-1, 3)
    depth = np.asarray(scan.depth, dtype=float).reshape(-1)
    if fmt == "sim":
        pid = getattr(scan, "patch_id", None)
        pid = np.full(len(depth), -1) if pid is None else np.asarray(pid)
        with open(path, "w") as fh:
            fh.write("# ox oy oz depth patch_id\n")
            for w, d, k in zip(omega, depth, pid):
                fh.write(f"{w[0]:.17g} {w[1]:.17g} {w[2]:.17g} {d:.17g} {int(k)}\n")
    elif fmt == "kitti-bin":
        rec = np.zeros((len(depth), 4), dtype="<f4")
        rec[:, :3] = omega * depth[:, None]
        Path(path).write_bytes(rec.tobytes())
    elif fmt == "ply-ascii":
        P = omega * depth[:, None]
        with open(path, "w") as fh:
            fh.write(f"ply\nformat ascii 1.0\nelement vertex {len(P)}\n")
            fh.write("property float x\nproperty float y\nproperty float z\nend_header\n")
            for p in P:
                fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")
    else:
        raise UnknownFormatError(f"unknown scan format {fmt!r}")


SCAN_SUFFIX = {"kitti-bin": ".bin", "ply-ascii": ".ply", "sim": ".sim"}


def list_scans(directory, fmt: str) -> list[Path]:
    """Scan files of ``fmt`` in ``directory``, in lexicographic order."""
    if fmt not in SCAN_SUFFIX:
        raise UnknownFormatError(f"unknown scan format {fmt!r}")
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"scan directory {directory} does not exist")
    return sorted(p for p in d.iterdir() if p.suffix == SCAN_SUFFIX[fmt])


# ------------------------------------------------------------------- poses


def format_pose(pose: Pose, timestamp: float | None = None) -> str:
    vals = np.hstack([pose.R, pose.t[:, None]]).ravel()
    row = " ".join(f"{v:.12e}" for v in vals)
    return row if timestamp is None else f"{timestamp:.9f} {row}"


def write_poses(path, poses, timestamps=None, header: list[str] | None = None) -> None:
    with open(path, "w") as fh:
        for line in header or []:
            fh.write(f"# {line}\n")
        for k, pose in enumerate(poses):
            fh.write(format_pose(pose, None if timestamps is None else timestamps[k]) + "\n")


def read_poses(path) -> tuple[list[Pose], np.ndarray | None]:
    """Poses and (if present) timestamps from a KITTI-style file."""
    poses: list[Pose] = []
    stamps: list[float] = []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                v = np.array([float(x) for x in line.split()])
            except ValueError:
                raise ScanParseError(f"{path}:{lineno}: non-numeric pose entry") from None
            if v.size not in (12, 13) or (width is not None and v.size != width):
                raise ScanParseError(f"{path}:{lineno}: expected 12 or 13 numbers per line, got {v.size}")
            width = v.size
            if v.size == 13:
                stamps.append(v[0])
                v = v[1:]
            M = v.reshape(3, 4)
            poses.append(Pose(project_to_rotation(M[:, :3]), M[:, 3]))
    ts = np.array(stamps) if width == 13 else None
    if ts is not None and np.any(np.diff(ts) < 0):
        raise ScanParseError(f"{path}: timestamps are not monotone")
    return poses, ts
