"""Plane fitting and first-order propagation of point covariances into (n, q)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom import sym_eigen3, symmetrize


class InsufficientPointsError(ValueError):
    pass


class DegeneratePlaneError(ValueError):
    """Raised when the two smallest scatter eigenvalues are (nearly) equal."""


@dataclass(frozen=True)
class PlaneFit:
    points: np.ndarray  # (N, 3)
    q: np.ndarray
    A: np.ndarray
    U: np.ndarray
    lam: np.ndarray  # descending

    @property
    def N(self) -> int:
        return len(self.points)

    @property
    def lam3(self) -> float:
        return float(self.lam[2])


@dataclass(frozen=True)
class PlaneFeature:
    n: np.ndarray
    q: np.ndarray
    cov: np.ndarray  # 6x6 over (n, q)
    lam3: float
    num_points: int
    is_plane: bool = True
    converged: bool = False
    radius: float = np.inf  # sqrt of the largest scatter eigenvalue

    @property
    def cov_nn(self) -> np.ndarray:
        return self.cov[:3, :3]

    def normal_trace(self) -> float:
        return float(np.trace(self.cov[:3, :3]))


def fit_plane(points) -> PlaneFit:
    """Centroid and ``1/N`` scatter matrix with its eigen-decomposition."""
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(P) < 3:
        raise InsufficientPointsError(f"need at least 3 points, got {len(P)}")
    q = P.mean(axis=0)
    D = P - q
    A = symmetrize(D.T @ D / len(P))
    U, lam = sym_eigen3(A)
    return PlaneFit(P, q, A, U, lam)


def orient_normal(fit: PlaneFit, viewpoint) -> np.ndarray:
    """Smallest-eigenvalue eigenvector, signed to face ``viewpoint``.

    When the viewpoint lies in the plane the eigensolver's sign convention
    (largest component positive) is kept.
    """
    n = fit.U[:, 2].copy()
    s = float(np.dot(n, np.asarray(viewpoint, dtype=float) - fit.q))
    if s < -1e-12 * max(1.0, np.linalg.norm(fit.q)):
        n = -n
    return n


def _check_degenerate(fit: PlaneFit) -> None:
    floor = 1e-6 * max(fit.lam[0], 1e-12)
    if abs(fit.lam[2] - fit.lam[1]) < floor:
        raise DegeneratePlaneError(
            f"lambda2={fit.lam[1]:.3e} and lambda3={fit.lam[2]:.3e} are not separable"
        )


def plane_jacobians(fit: PlaneFit, n=None) -> np.ndarray:
    """Per-point Jacobians ``d(n, q)/d p_i`` stacked as ``(N, 6, 3)``.

    ``n`` selects the sign branch of the normal (defaults to ``U[:, 2]``);
    the derivative formula is written in terms of ``n`` so either branch is
    differentiated consistently.
    """
    _check_degenerate(fit)
    if n is None:
        n = fit.U[:, 2]
    n = np.asarray(n, dtype=float)
    N = fit.N
    D = fit.points - fit.q
    dn = np.zeros((N, 3, 3))
    a_n = D @ n
    for m in range(2):
        u = fit.U[:, m]
        a_m = D @ u
        # (p - q)^T (u n^T + n u^T) = a_m n^T + a_n u^T
        row = a_m[:, None] * n + a_n[:, None] * u
        dn += u[None, :, None] * row[:, None, :] / (N * (fit.lam[2] - fit.lam[m]))
    J = np.zeros((N, 6, 3))
    J[:, :3, :] = dn
    J[:, 3:, :] = np.eye(3) / N
    return J


def plane_cov(fit: PlaneFit, jacobians: np.ndarray, point_covs) -> np.ndarray:
    """``sum_i J_i Sigma_i J_i^T`` as a symmetric 6x6 matrix."""
    C = np.asarray(point_covs, dtype=float).reshape(-1, 3, 3)
    if len(C) != fit.N or len(jacobians) != fit.N:
        raise ValueError("jacobians and covariances must align with the fitted points")
    cov = np.einsum("nij,njk,nlk->il", jacobians, C, jacobians)
    return symmetrize(cov)


def make_feature(
    points,
    covs,
    viewpoint=None,
    reference_normal=None,
    threshold: float = np.inf,
) -> PlaneFeature:
    """Fit a plane and its covariance in one go.

    The normal faces ``viewpoint``; if ``reference_normal`` is given instead,
    the hemisphere of that normal is kept.
    """
    fit = fit_plane(points)
    if reference_normal is not None:
        n = fit.U[:, 2].copy()
        if np.dot(n, reference_normal) < 0.0:
            n = -n
    else:
        n = orient_normal(fit, np.zeros(3) if viewpoint is None else viewpoint)
    J = plane_jacobians(fit, n)
    cov = plane_cov(fit, J, covs)
    return PlaneFeature(
        n, fit.q, cov, fit.lam3, fit.N, is_plane=fit.lam3 < threshold, radius=float(np.sqrt(fit.lam[0]))
    )
