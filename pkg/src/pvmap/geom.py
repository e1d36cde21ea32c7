"""Small dense linear algebra and SO(3)/SE(3) helpers.

Conventions used throughout the package:

* rotations are perturbed on the right, ``R [+] dtheta = R @ so3_exp(dtheta)``;
  translations are perturbed additively;
* tangent 6-vectors are ordered ``[dtheta; dt]``;
* eigenvalues of symmetric 3x3 matrices are returned in descending order, so
  index 2 holds the smallest one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SMALL_ANGLE = 1e-8


def skew(v) -> np.ndarray:
    """Return the matrix ``K`` with ``K @ w == np.cross(v, w)``."""
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def skew_batch(v: np.ndarray) -> np.ndarray:
    """Stacked version of :func:`skew` for an ``(N, 3)`` array."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def symmetrize(S: np.ndarray) -> np.ndarray:
    """Exact symmetric part of a (stack of) square matrices."""
    return 0.5 * (S + np.swapaxes(S, -1, -2))


def so3_exp(theta) -> np.ndarray:
    """Rodrigues' formula, with a second-order Taylor expansion near zero."""
    theta = np.asarray(theta, dtype=float)
    angle = float(np.linalg.norm(theta))
    K = skew(theta)
    if angle < SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * K @ K
    a = np.sin(angle) / angle
    b = (1.0 - np.cos(angle)) / angle**2
    return np.eye(3) + a * K + b * K @ K


def so3_exp_batch(theta: np.ndarray) -> np.ndarray:
    """Vectorised :func:`so3_exp` over an ``(N, 3)`` array."""
    theta = np.asarray(theta, dtype=float)
    angle = np.linalg.norm(theta, axis=-1)
    K = skew_batch(theta)
    K2 = K @ K
    small = angle < SMALL_ANGLE
    safe = np.where(small, 1.0, angle)
    a = np.where(small, 1.0, np.sin(safe) / safe)
    b = np.where(small, 0.5, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * K2


def so3_log(R) -> np.ndarray:
    """Inverse of :func:`so3_exp` for rotation angles in ``[0, pi]``."""
    R = np.asarray(R, dtype=float)
    w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = float(np.linalg.norm(w))
    c = 0.5 * (np.trace(R) - 1.0)
    angle = np.arctan2(s, c)
    if angle < SMALL_ANGLE:
        # R ~ I + K + K^2/2, whose antisymmetric part is exactly K.
        return w
    if s > 1e-6 or c > 0.0:
        return w * (angle / s)
    # Near pi the antisymmetric part vanishes; recover the axis from
    # (R + R^T)/2 = cos(a) I + (1 - cos(a)) a a^T.
    B = 0.5 * (R + R.T) - c * np.eye(3)
    k = int(np.argmax(np.diag(B)))
    axis = B[:, k] / np.sqrt(B[k, k] * (1.0 - c))
    axis /= np.linalg.norm(axis)
    if np.dot(axis, w) < 0.0:
        axis = -axis
    return axis * angle


def right_jacobian_inv(theta) -> np.ndarray:
    """Inverse right Jacobian of SO(3).

    ``so3_log(so3_exp(theta) @ so3_exp(d)) ~ theta + right_jacobian_inv(theta) @ d``.
    """
    theta = np.asarray(theta, dtype=float)
    angle = float(np.linalg.norm(theta))
    K = skew(theta)
    if angle < 1e-6:
        return np.eye(3) + 0.5 * K + K @ K / 12.0
    coef = 1.0 / angle**2 - (1.0 + np.cos(angle)) / (2.0 * angle * np.sin(angle))
    return np.eye(3) + 0.5 * K + coef * K @ K


def _fix_signs(U: np.ndarray) -> np.ndarray:
    # Column-wise: make the largest-magnitude component positive.
    idx = np.argmax(np.abs(U), axis=-2)
    picked = np.take_along_axis(U, idx[..., None, :], axis=-2)
    return U * np.where(picked < 0.0, -1.0, 1.0)


def sym_eigen3(A) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric 3x3 matrix.

    Returns ``(U, lam)`` with ``lam[0] >= lam[1] >= lam[2]`` and the matching
    eigenvectors as the columns of ``U``. Each eigenvector is signed so that
    its largest-magnitude component is positive.
    """
    A = symmetrize(np.asarray(A, dtype=float))
    lam, U = np.linalg.eigh(A)
    return _fix_signs(U[..., ::-1]), lam[..., ::-1].copy()


def sym_eigen3_batch(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """:func:`sym_eigen3` over a stack of shape ``(..., 3, 3)``."""
    return sym_eigen3(A)


def is_rotation(R, tol: float = 1e-9) -> bool:
    R = np.asarray(R, dtype=float)
    return (
        R.shape == (3, 3)
        and np.max(np.abs(R.T @ R - np.eye(3))) < tol
        and np.linalg.det(R) > 0.0
    )


def project_to_rotation(M) -> np.ndarray:
    """Closest rotation matrix in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=float))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


@dataclass
class Pose:
    """Rigid transform ``p_world = R @ p_local + t`` with tangent-space uncertainty.

    ``cov_R`` is expressed in the right-perturbation tangent space (rad^2),
    ``cov_t`` in meters^2.
    """

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    cov_R: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    cov_t: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=float).reshape(3)
        self.cov_R = np.asarray(self.cov_R, dtype=float).reshape(3, 3)
        self.cov_t = np.asarray(self.cov_t, dtype=float).reshape(3, 3)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    def transform(self, p: np.ndarray) -> np.ndarray:
        """Map local points (``(3,)`` or ``(N, 3)``) into the world frame."""
        return np.asarray(p) @ self.R.T + self.t

    def compose(self, other: "Pose") -> "Pose":
        """``self * other`` (uncertainty is not propagated)."""
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)

    def boxplus(self, delta) -> "Pose":
        delta = np.asarray(delta, dtype=float)
        return Pose(self.R @ so3_exp(delta[:3]), self.t + delta[3:], self.cov_R, self.cov_t)

    def boxminus(self, other: "Pose") -> np.ndarray:
        """Tangent vector ``d`` with ``other.boxplus(d) == self``."""
        return np.concatenate([so3_log(other.R.T @ self.R), self.t - other.t])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])
