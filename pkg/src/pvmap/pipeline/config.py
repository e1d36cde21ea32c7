"""Flat run configuration backed by YAML, with strict key validation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import yaml

from ..estimator import EstimatorConfig
from ..simulator import SphericalPattern
from ..uncertainty import DEFAULT_SIGMA_D, DEFAULT_SIGMA_OMEGA, SensorNoise
from ..voxelmap import MapConfig, UpdateConfig


class ConfigError(ValueError):
    """Invalid, unknown or ill-typed configuration value."""


SCAN_FORMATS = ("kitti-bin", "ply-ascii", "sim")


@dataclass
class RunConfig:
    # sensor noise
    sigma_d: float = DEFAULT_SIGMA_D
    sigma_omega: float = DEFAULT_SIGMA_OMEGA
    # map
    voxel_size: float = 2.0
    max_layer: int = 3
    plane_threshold: float = 0.01
    min_points: int = 10
    n_conv: int = 50
    k_recent: int = 10
    rebuild_angle_deg: float = 10.0
    rebuild_patience: int = 3
    max_points: int = 1000
    # estimator
    rot_noise: float = 0.01
    trans_noise: float = 0.1
    max_iter: int = 5
    eps: float = 1e-6
    rematch: bool = True
    # matcher
    downsample: float = 0.25
    query_adjacent: bool = False
    # I/O
    scan_dir: str = ""
    scan_format: str = "sim"
    output_dir: str = "out"
    max_frames: int = 0  # 0 means all
    seed: int = 0
    # simulation (``simulate`` subcommand)
    sim_scene: str = "corridor"
    sim_trajectory: str = "corridor"
    sim_frames: int = 100
    sim_speed: float = 0.1
    sim_radius: float = 3.0
    sim_start_x: float = 0.0
    sim_start_y: float = 0.0
    sim_start_z: float = 0.0
    sim_azimuths: int = 640
    sim_elevations: int = 16
    sim_min_elevation_deg: float = -25.0
    sim_max_elevation_deg: float = 25.0
    sim_max_range: float = 60.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            want = _TYPES[f.type]
            if want is float and isinstance(v, int) and not isinstance(v, bool):
                v = float(v)
                setattr(self, f.name, v)
            if not isinstance(v, want) or (want is not bool and isinstance(v, bool)):
                raise ConfigError(f"{f.name}: expected {want.__name__}, got {v!r}")
        positive = (
            "sigma_d sigma_omega voxel_size plane_threshold rebuild_angle_deg rot_noise trans_noise eps "
            "sim_speed sim_radius sim_max_range"
        ).split()
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        at_least_one = "max_layer min_points n_conv k_recent rebuild_patience max_points max_iter sim_azimuths sim_elevations".split()
        for name in at_least_one:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.downsample < 0 or self.max_frames < 0 or self.sim_frames < 0:
            raise ConfigError("downsample, max_frames and sim_frames must be non-negative")
        if self.scan_format not in SCAN_FORMATS:
            raise ConfigError(f"scan_format must be one of {', '.join(SCAN_FORMATS)}")
        if not self.sim_min_elevation_deg < self.sim_max_elevation_deg:
            raise ConfigError("sim_min_elevation_deg must be below sim_max_elevation_deg")
        try:
            self.map_config()
            self.estimator_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    # ------------------------------------------------------------- builders

    def noise(self) -> SensorNoise:
        return SensorNoise(self.sigma_d, self.sigma_omega)

    def map_config(self) -> MapConfig:
        upd = UpdateConfig(
            n_conv=self.n_conv,
            k_recent=self.k_recent,
            rebuild_angle=float(np.deg2rad(self.rebuild_angle_deg)),
            rebuild_patience=self.rebuild_patience,
            max_points=self.max_points,
        )
        return MapConfig(
            voxel_size=self.voxel_size,
            max_layer=self.max_layer,
            plane_threshold=self.plane_threshold,
            min_points=self.min_points,
            query_adjacent=self.query_adjacent,
            update=upd,
        )

    def estimator_config(self) -> EstimatorConfig:
        return EstimatorConfig(
            max_iter=self.max_iter,
            eps=self.eps,
            rot_noise=self.rot_noise,
            trans_noise=self.trans_noise,
            rematch=self.rematch,
            downsample=self.downsample,
        )

    def pattern(self) -> SphericalPattern:
        return SphericalPattern(
            azimuths=self.sim_azimuths,
            elevations=self.sim_elevations,
            min_elevation=float(np.deg2rad(self.sim_min_elevation_deg)),
            max_elevation=float(np.deg2rad(self.sim_max_elevation_deg)),
        )

    # -------------------------------------------------------- serialization

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict | None) -> "RunConfig":
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if data is not None and not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping of flat keys")
        return cls.from_dict(data)

    def dump(self, path) -> None:
        Path(path).write_text(self.to_yaml())

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def replace(self, **overrides) -> "RunConfig":
        return RunConfig.from_dict({**self.to_dict(), **overrides})

    def header_lines(self) -> list[str]:
        """``key: value`` lines used to echo the config into text outputs."""
        return [f"{k}: {v!r}" if isinstance(v, str) else f"{k}: {v}" for k, v in self.to_dict().items()]


_TYPES = {"float": float, "int": int, "bool": bool, "str": str}
