"""Probabilistic adaptive voxel mapping for LiDAR odometry.

Point uncertainty from range and bearing noise, plane features with 6x6
covariances, a hashed coarse-to-fine octree map, gated point-to-plane
matching and an iterated Kalman filter pose update, plus a ray-casting
simulator used to check all of it.
"""

from .estimator import EstimatorConfig, Odometry, State, iekf_update, propagate_cv, register_scan
from .geom import Pose, so3_exp, so3_log
from .matcher import Match, match_point, match_scan
from .plane import PlaneFeature, PlaneFit, fit_plane
from .uncertainty import RawPoint, SensorNoise, WorldPoint
from .voxelmap import MapConfig, UpdateConfig, VoxelMap

__version__ = "0.1.0"

__all__ = [
    "EstimatorConfig",
    "MapConfig",
    "Match",
    "Odometry",
    "PlaneFeature",
    "PlaneFit",
    "Pose",
    "RawPoint",
    "SensorNoise",
    "State",
    "UpdateConfig",
    "VoxelMap",
    "WorldPoint",
    "fit_plane",
    "iekf_update",
    "match_point",
    "match_scan",
    "propagate_cv",
    "register_scan",
    "so3_exp",
    "so3_log",
]
