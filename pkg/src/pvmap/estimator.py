"""Iterated Kalman filter (MAP) pose estimation from point-to-plane residuals."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .geom import Pose, project_to_rotation, right_jacobian_inv, skew_batch, so3_exp, so3_log, symmetrize
from .matcher import GATE_SIGMAS, match_arrays, voxel_downsample
from .uncertainty import SensorNoise, local_point_covs, world_point_covs
from .voxelmap import InsertReport, VoxelMap


class DegenerateGeometryError(RuntimeError):
    """The normal equations are too ill-conditioned to trust the update."""


@dataclass
class EstimatorConfig:
    max_iter: int = 5
    eps: float = 1e-6
    rot_noise: float = 0.01  # rad per frame, constant-velocity process noise
    trans_noise: float = 0.1  # m per frame
    rematch: bool = True  # re-associate at every iterate with its own covariance
    max_condition: float = 1e12
    downsample: float = 0.25  # m, 0 disables

    def process_noise(self) -> np.ndarray:
        return np.diag([self.rot_noise**2] * 3 + [self.trans_noise**2] * 3)


@dataclass
class State:
    """Pose with a 6x6 tangent covariance ordered ``[dtheta; dt]``."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    P: np.ndarray = field(default_factory=lambda: np.zeros((6, 6)))

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=float).reshape(3)
        self.P = np.asarray(self.P, dtype=float).reshape(6, 6)

    @property
    def pose(self) -> Pose:
        return Pose(self.R, self.t, self.P[:3, :3], self.P[3:, 3:])

    def boxplus(self, dx) -> "State":
        dx = np.asarray(dx, dtype=float)
        return State(project_to_rotation(self.R @ so3_exp(dx[:3])), self.t + dx[3:], self.P)

    def boxminus(self, other: "State") -> np.ndarray:
        return np.concatenate([so3_log(other.R.T @ self.R), self.t - other.t])


@dataclass
class Observation:
    z: float
    H: np.ndarray  # (6,)
    R: float


@dataclass
class Associations:
    """Matched scan points with the plane parameters they were associated to."""

    local_points: np.ndarray  # (m, 3) body-frame points
    local_covs: np.ndarray  # (m, 3, 3)
    n: np.ndarray
    q: np.ndarray
    cov_nq: np.ndarray  # (m, 6, 6)
    gate_var: np.ndarray | None = None  # (m,) distance variance incl. pose uncertainty

    def __len__(self) -> int:
        return len(self.local_points)

    @classmethod
    def empty(cls) -> "Associations":
        return cls(np.empty((0, 3)), np.empty((0, 3, 3)), np.empty((0, 3)), np.empty((0, 3)), np.empty((0, 6, 6)))


@dataclass
class UpdateReport:
    iterations: int = 0
    matches: int = 0
    cost_before: float = 0.0
    cost_after: float = 0.0
    converged: bool = False


def propagate_cv(history: list[State], config: EstimatorConfig | None = None) -> State:
    """Constant-velocity prior: repeat the last inter-frame motion."""
    config = config or EstimatorConfig()
    if not history:
        return State()
    last = history[-1]
    Q = config.process_noise()
    if len(history) < 2:
        return State(last.R, last.t, symmetrize(last.P + Q))
    prev = history[-2]
    dR = prev.R.T @ last.R
    dt = prev.R.T @ (last.t - prev.t)
    # Extrapolation doubles any departure from SO(3) every frame; re-project.
    return State(project_to_rotation(last.R @ dR), last.t + last.R @ dt, symmetrize(last.P + Q))


def linearize_batch(assoc: Associations, R: np.ndarray, t: np.ndarray):
    """Residuals ``z``, Jacobians ``H`` (m, 6) and noise variances at ``(R, t)``."""
    lp = assoc.local_points
    wp = lp @ R.T + t
    diff = wp - assoc.q
    z = np.einsum("mi,mi->m", assoc.n, diff)
    nR = assoc.n @ R  # rows n^T R
    H = np.empty((len(lp), 6))
    H[:, :3] = -np.einsum("mi,mij->mj", nR, skew_batch(lp))
    H[:, 3:] = assoc.n
    J = np.concatenate([diff, -assoc.n], axis=1)
    Rn = np.einsum("mi,mij,mj->m", J, assoc.cov_nq, J)
    Rn += np.einsum("mi,mij,mj->m", nR, assoc.local_covs, nR)
    return z, H, Rn


def linearize(match, state: State, local_point, local_cov) -> Observation:
    """Observation for one match at the linearization point ``state``."""
    assoc = Associations(
        np.asarray(local_point, dtype=float)[None],
        np.asarray(local_cov, dtype=float)[None],
        np.asarray(match.plane.n)[None],
        np.asarray(match.plane.q)[None],
        np.asarray(match.plane.cov)[None],
    )
    z, H, Rn = linearize_batch(assoc, state.R, state.t)
    return Observation(float(z[0]), H[0], float(Rn[0]))


def _prior_residual(state: State, prior: State):
    e = state.boxminus(prior)
    Jp = np.eye(6)
    Jp[:3, :3] = right_jacobian_inv(e[:3])
    return e, Jp


def map_cost(state: State, prior: State, assoc: Associations, weights: np.ndarray) -> float:
    """Prior Mahalanobis term plus weighted squared point-to-plane residuals."""
    e = state.boxminus(prior)
    cost = float(e @ np.linalg.solve(prior.P, e))
    if len(assoc):
        wp = assoc.local_points @ state.R.T + state.t
        z = np.einsum("mi,mi->m", assoc.n, wp - assoc.q)
        cost += float(np.sum(z * z / weights))
    return cost


def iekf_update(
    prior: State,
    assoc: Associations,
    config: EstimatorConfig | None = None,
    rematch=None,
) -> tuple[State, UpdateReport]:
    """Iterated Gauss-Newton on the MAP cost around the prior.

    The residual noise variances are evaluated once per association set so
    that the iterations sharing it minimise the same cost; steps that would
    raise it are halved (at most four times) or rejected. ``rematch``, if
    given, is called as ``rematch(x)`` with the current iterate, whose ``P``
    holds the covariance implied by the last linearisation, to rebuild the
    associations before each iteration after the first.
    """
    config = config or EstimatorConfig()
    report = UpdateReport(matches=len(assoc))
    P_inv = np.linalg.inv(prior.P)
    if len(assoc) == 0:
        return State(prior.R, prior.t, prior.P), report
    x = State(prior.R, prior.t, prior.P)
    _, _, weights = linearize_batch(assoc, x.R, x.t)
    weights = np.maximum(weights, 1e-12)
    cost = map_cost(x, prior, assoc, weights)
    report.cost_before = cost
    HtRH = np.zeros((6, 6))
    for it in range(config.max_iter):
        if rematch is not None and it > 0:
            assoc = rematch(State(x.R, x.t, P_gate))
            if len(assoc) == 0:
                break
            report.matches = len(assoc)
            _, _, weights = linearize_batch(assoc, x.R, x.t)
            weights = np.maximum(weights, 1e-12)
            cost = map_cost(x, prior, assoc, weights)
        z, H, _ = linearize_batch(assoc, x.R, x.t)
        e, Jp = _prior_residual(x, prior)
        Hw = H / weights[:, None]
        HtRH = H.T @ Hw
        info = Jp.T @ P_inv @ Jp + HtRH
        grad = Jp.T @ P_inv @ e + Hw.T @ z
        if not np.all(np.isfinite(info)) or not np.all(np.isfinite(grad)):
            raise DegenerateGeometryError("non-finite normal equations")
        cond = np.linalg.cond(info)
        if cond > config.max_condition:
            raise DegenerateGeometryError(f"normal equations condition {cond:.3e}")
        dx = -np.linalg.solve(info, grad)
        if not np.all(np.isfinite(dx)):
            raise DegenerateGeometryError("non-finite update step")
        P_iter = symmetrize(np.linalg.inv(info))
        report.iterations = it + 1
        step = 1.0
        accepted = False
        for _ in range(5):
            cand = x.boxplus(step * dx)
            c = map_cost(cand, prior, assoc, weights)
            if c <= cost:
                x, cost, accepted = cand, c, True
                break
            step *= 0.5
        # While the iterate is still moving, the last step bounds the remaining
        # error per axis; it becomes the 3-sigma width of the next gate.
        applied = step * dx if accepted else np.zeros(6)
        P_gate = P_iter + np.diag((applied / GATE_SIGMAS) ** 2)
        if not accepted or np.linalg.norm(applied) < config.eps:
            report.converged = True
            break
    report.cost_after = cost
    # Posterior covariance in the information form at the final iterate.
    z, H, _ = linearize_batch(assoc, x.R, x.t)
    HtRH = H.T @ (H / weights[:, None])
    P_post = symmetrize(np.linalg.inv(P_inv + HtRH))
    return State(x.R, x.t, P_post), report


@dataclass
class FrameResult:
    frame: int
    state: State
    matches: int = 0
    iterations: int = 0
    cost_before: float = 0.0
    cost_after: float = 0.0
    flagged: bool = False
    timings: dict = field(default_factory=dict)
    insert: InsertReport | None = None

    def diagnostics(self) -> dict:
        return {
            "frame": self.frame,
            "iterations": self.iterations,
            "matches": self.matches,
            "cost_before": self.cost_before,
            "cost_after": self.cost_after,
            "flagged": self.flagged,
            **{f"time_{k}": v for k, v in self.timings.items()},
        }


class Odometry:
    """Per-frame driver: prior, association, update and map insertion."""

    def __init__(self, vmap: VoxelMap, noise: SensorNoise | None = None, config: EstimatorConfig | None = None):
        self.map = vmap
        self.noise = noise or SensorNoise()
        self.config = config or EstimatorConfig()
        self.history: list[State] = []

    def _associate(self, state: State, lp, lcov) -> Associations:
        pose = state.pose
        wp = pose.transform(lp)
        wcov = world_point_covs(lp, lcov, pose)
        m = match_arrays(wp, wcov, self.map)
        idx = m.index
        return Associations(lp[idx], lcov[idx], m.n, m.q, m.cov_nq, m.variance)

    def register_scan(self, omega: np.ndarray, depth: np.ndarray) -> FrameResult:
        t0 = time.perf_counter()
        frame = len(self.history)
        omega = np.asarray(omega, dtype=float).reshape(-1, 3)
        depth = np.asarray(depth, dtype=float).reshape(-1)
        finite = np.isfinite(depth) & np.all(np.isfinite(omega), axis=1) & (depth > 0)
        omega, depth = omega[finite], depth[finite]
        keep = voxel_downsample(omega * depth[:, None], self.config.downsample)
        omega, depth = omega[keep], depth[keep]
        lp = omega * depth[:, None]
        lcov = local_point_covs(omega, depth, self.noise)
        timings = {"preprocess": time.perf_counter() - t0}
        if not self.history and len(self.map) == 0:
            # The first frame defines the world frame.
            state = State()
            t1 = time.perf_counter()
            report = self.map.insert(lp, world_point_covs(lp, lcov, state.pose), state.t)
            timings.update(match=0.0, update=0.0, insert=time.perf_counter() - t1)
            self.history.append(state)
            timings["total"] = time.perf_counter() - t0
            return FrameResult(frame, state, timings=timings, insert=report)
        prior = propagate_cv(self.history, self.config)
        t1 = time.perf_counter()
        assoc = self._associate(prior, lp, lcov)
        t2 = time.perf_counter()
        rematch = (lambda s: self._associate(s, lp, lcov)) if self.config.rematch else None
        try:
            post, upd = iekf_update(prior, assoc, self.config, rematch)
        except DegenerateGeometryError:
            self.history.append(prior)
            timings.update(match=t2 - t1, update=time.perf_counter() - t2, insert=0.0)
            timings["total"] = time.perf_counter() - t0
            return FrameResult(frame, prior, matches=len(assoc), flagged=True, timings=timings)
        t3 = time.perf_counter()
        pose = post.pose
        report = self.map.insert(pose.transform(lp), world_point_covs(lp, lcov, pose), post.t)
        t4 = time.perf_counter()
        self.history.append(post)
        timings.update(match=t2 - t1, update=t3 - t2, insert=t4 - t3, total=t4 - t0)
        return FrameResult(
            frame,
            post,
            matches=upd.matches,
            iterations=upd.iterations,
            cost_before=upd.cost_before,
            cost_after=upd.cost_after,
            timings=timings,
            insert=report,
        )


def register_scan(omega, depth, vmap: VoxelMap, history: list[State], noise=None, config=None) -> FrameResult:
    """Functional form of :meth:`Odometry.register_scan`; appends to ``history``."""
    odo = Odometry(vmap, noise, config)
    odo.history = history
    return odo.register_scan(np.asarray(omega, dtype=float), np.asarray(depth, dtype=float))
