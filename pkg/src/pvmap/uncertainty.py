"""LiDAR point uncertainty: measurement-frame covariance and world-frame propagation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom import Pose, skew_batch, symmetrize

DEFAULT_SIGMA_D = 0.02
DEFAULT_SIGMA_OMEGA = float(np.deg2rad(0.05))


@dataclass(frozen=True)
class SensorNoise:
    """Ranging std ``sigma_d`` (m) and bearing std ``sigma_omega`` (rad).

    ``cov_omega`` optionally replaces the isotropic ``sigma_omega**2 * I2``
    bearing covariance with a full 2x2 matrix in the tangent basis.
    """

    sigma_d: float = DEFAULT_SIGMA_D
    sigma_omega: float = DEFAULT_SIGMA_OMEGA
    cov_omega: np.ndarray | None = None

    def __post_init__(self):
        if not (self.sigma_d >= 0.0 and self.sigma_omega >= 0.0):
            raise ValueError("noise standard deviations must be non-negative")

    def bearing_cov(self) -> np.ndarray:
        if self.cov_omega is not None:
            return np.asarray(self.cov_omega, dtype=float).reshape(2, 2)
        return self.sigma_omega**2 * np.eye(2)


@dataclass(frozen=True)
class RawPoint:
    """One return: unit bearing ``omega`` and depth ``d``."""

    omega: np.ndarray
    d: float

    def __post_init__(self):
        omega = np.asarray(self.omega, dtype=float).reshape(3)
        object.__setattr__(self, "omega", omega)
        if abs(np.linalg.norm(omega) - 1.0) > 1e-6:
            raise ValueError(f"bearing must be a unit vector, got norm {np.linalg.norm(omega)}")
        if self.d < 0.0:
            raise ValueError("depth must be non-negative")

    @property
    def point(self) -> np.ndarray:
        return self.d * self.omega

    @classmethod
    def from_point(cls, p) -> "RawPoint":
        p = np.asarray(p, dtype=float)
        d = float(np.linalg.norm(p))
        return cls(p / d, d)


@dataclass
class WorldPoint:
    p: np.ndarray
    cov: np.ndarray


def tangent_basis_batch(omega: np.ndarray) -> np.ndarray:
    """Orthonormal tangent bases ``(N, 3, 2)`` for unit bearings ``(N, 3)``.

    The first column comes from Gram-Schmidt on the coordinate axis least
    aligned with the bearing, the second is ``omega x N1``.
    """
    omega = np.asarray(omega, dtype=float)
    norms = np.linalg.norm(omega, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValueError("tangent_basis requires unit bearing vectors")
    axis = np.argmin(np.abs(omega), axis=-1)
    e = np.zeros_like(omega)
    np.put_along_axis(e, axis[..., None], 1.0, axis=-1)
    n1 = e - np.sum(e * omega, axis=-1, keepdims=True) * omega
    n1 /= np.linalg.norm(n1, axis=-1, keepdims=True)
    n2 = np.cross(omega, n1)
    return np.stack([n1, n2], axis=-1)


def tangent_basis(omega) -> np.ndarray:
    return tangent_basis_batch(np.asarray(omega, dtype=float)[None])[0]


def local_point_covs(omega: np.ndarray, d: np.ndarray, noise: SensorNoise) -> np.ndarray:
    """Measurement-frame covariances ``(N, 3, 3)``.

    ``Sigma = A diag(sigma_d^2, Sigma_omega) A^T`` with
    ``A = [omega, -d [omega]x N(omega)]``.
    """
    omega = np.asarray(omega, dtype=float)
    d = np.asarray(d, dtype=float)
    Nb = tangent_basis_batch(omega)
    A = np.empty(omega.shape[:-1] + (3, 3))
    A[..., :, 0] = omega
    A[..., :, 1:] = -d[..., None, None] * (skew_batch(omega) @ Nb)
    S = np.zeros((3, 3))
    S[0, 0] = noise.sigma_d**2
    S[1:, 1:] = noise.bearing_cov()
    return symmetrize(A @ S @ np.swapaxes(A, -1, -2))


def local_point_cov(rp: RawPoint, noise: SensorNoise) -> np.ndarray:
    return local_point_covs(rp.omega[None], np.array([rp.d]), noise)[0]


def world_point_covs(local_points: np.ndarray, local_covs: np.ndarray, pose: Pose) -> np.ndarray:
    """World-frame covariances ``(N, 3, 3)`` of points seen through an uncertain pose.

    The rotation term is ``R [p]x Sigma_R [p]x^T R^T``: the pose uncertainty
    lives in the body-frame (right-perturbation) tangent space, so it has to
    be rotated into the world frame together with the measurement term.
    """
    R = pose.R
    P = skew_batch(local_points)
    RP = R @ P
    cov = R @ local_covs @ R.T + RP @ pose.cov_R @ np.swapaxes(RP, -1, -2) + pose.cov_t
    return symmetrize(cov)


def world_point_cov(rp: RawPoint, local_cov: np.ndarray, pose: Pose) -> WorldPoint:
    lp = rp.point
    cov = world_point_covs(lp[None], np.asarray(local_cov)[None], pose)[0]
    return WorldPoint(pose.transform(lp), cov)
