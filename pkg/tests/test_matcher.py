import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pvmap.geom import Pose, so3_exp
from pvmap.matcher import (
    VARIANCE_FLOOR,
    match_point,
    match_scan,
    point_to_plane,
    residual_variance,
    voxel_downsample,
    within_extent,
)
from pvmap.plane import PlaneFeature, fit_plane, make_feature
from pvmap.simulator import SphericalPattern, room, rng_for, simulate_scan
from pvmap.uncertainty import SensorNoise, WorldPoint, local_point_covs, world_point_covs
from pvmap.voxelmap import RootPlanes, VoxelMap

from conftest import random_unit


def flat_plane(cov=None, radius=10.0):
    return PlaneFeature(np.array([0, 0, 1.0]), np.zeros(3), np.zeros((6, 6)) if cov is None else cov, 0.0, 100, radius=radius)


def test_distance_examples():
    pl = flat_plane()
    assert point_to_plane(pl.q, pl) == 0.0
    assert point_to_plane([5, -2, 0.3], pl) == pytest.approx(0.3)
    flipped = PlaneFeature(-pl.n, pl.q, pl.cov, 0.0, 100)
    assert point_to_plane([5, -2, 0.3], flipped) == pytest.approx(-0.3)


@given(st.integers(0, 2**31 - 1))
def test_distance_matches_hesse_form(seed):
    rng = np.random.default_rng(seed)
    n = random_unit(rng)
    q = rng.normal(size=3) * 5
    p = rng.normal(size=3) * 5
    pl = PlaneFeature(n, q, np.zeros((6, 6)), 0.0, 10)
    # Hesse normal form n.x = c with c = n.q.
    assert point_to_plane(p, pl) == pytest.approx(n @ p - n @ q, abs=1e-12)


def test_variance_point_only():
    var, floored = residual_variance(WorldPoint([1, 2, 0.1], 0.03**2 * np.eye(3)), flat_plane())
    assert var == pytest.approx(0.03**2) and not floored


def test_variance_floor():
    var, floored = residual_variance(WorldPoint([1, 2, 0.0], np.zeros((3, 3))), flat_plane())
    assert var == VARIANCE_FLOOR and floored


def test_variance_monte_carlo():
    # Independent oracle: refit the plane from freshly noised points and
    # noise the query point, then take the empirical variance of d.
    sig_map, sig_p = 0.05, 0.03
    clean = np.column_stack([rng_for(5, 0).uniform(-1, 1, (100, 2)), np.zeros(100)])
    feature = make_feature(clean, np.broadcast_to(sig_map**2 * np.eye(3), (100, 3, 3)), viewpoint=[0, 0, 5])
    p0 = np.array([1.5, 0.7, 0.0])
    var, _ = residual_variance(WorldPoint(p0, sig_p**2 * np.eye(3)), feature)
    rng = rng_for(5, 1)
    d = np.empty(10_000)
    for k in range(len(d)):
        fit = fit_plane(clean + sig_map * rng.standard_normal(clean.shape))
        n = fit.U[:, 2] if fit.U[2, 2] > 0 else -fit.U[:, 2]
        d[k] = n @ (p0 + sig_p * rng.standard_normal(3) - fit.q)
    assert abs(d.var() / var - 1) < 0.10


def test_match_on_plane():
    vmap = VoxelMap.build(np.column_stack([rng_for(1, 0).uniform(0.1, 1.9, (100, 2)), np.ones(100)]), np.broadcast_to(1e-4 * np.eye(3), (100, 3, 3)))
    m = match_point(WorldPoint([1.0, 1.0, 1.0], 1e-4 * np.eye(3)), vmap)
    assert m is not None and abs(m.distance) < 1e-3
    far = match_point(WorldPoint([1.0, 1.0, 1.9], 1e-4 * np.eye(3)), vmap)
    assert far is None


def test_gate_rejects_twenty_sigma():
    pts = np.column_stack([rng_for(2, 0).uniform(0.1, 1.9, (100, 2)), np.full(100, 0.5)])
    vmap = VoxelMap.build(pts, np.zeros((100, 3, 3)))
    # Only the point covariance contributes: sqrt(var) = 0.05, the point is 1 m off.
    assert match_point(WorldPoint([1.0, 1.0, 1.5], 0.05**2 * np.eye(3)), vmap) is None
    assert match_point(WorldPoint([1.0, 1.0, 0.6], 0.05**2 * np.eye(3)), vmap) is not None


def test_selection_prefers_density_over_distance():
    # Two parallel candidate planes in one root: a tight one farther away and a
    # loose one nearer. Highest density wins, not smallest |d|.
    tight = PlaneFeature(np.array([0, 0, 1.0]), np.array([1, 1, 1.0]), np.zeros((6, 6)), 0.0, 100, radius=10.0)
    loose_cov = np.zeros((6, 6))
    loose_cov[5, 5] = 0.2**2
    loose = PlaneFeature(np.array([0, 0, 1.0]), np.array([1, 1, 1.05]), loose_cov, 0.0, 100, radius=10.0)
    p = WorldPoint([1, 1, 1.02], 0.01**2 * np.eye(3))
    vmap = VoxelMap()
    entry = RootPlanes([tight, loose], np.array([tight.n, loose.n]), np.array([tight.q, loose.q]), np.array([tight.cov, loose.cov]), np.array([10.0, 10.0]))
    vmap.roots[(0, 0, 0)] = object()
    vmap._cache[(0, 0, 0)] = entry
    m = match_point(p, vmap)
    assert m.plane is tight
    assert match_scan([p], vmap=vmap)[0].plane is tight


def test_selection_invariant_to_common_scaling():
    planes = []
    for z, s in [(1.0, 0.02), (1.03, 0.03), (0.98, 0.025)]:
        c = np.zeros((6, 6))
        c[5, 5] = s**2
        planes.append(PlaneFeature(np.array([0, 0, 1.0]), np.array([1, 1, z]), c, 0.0, 100, radius=10.0))
    p = np.array([1, 1, 1.005])

    def winner(scale):
        best, score = None, np.inf
        for k, pl in enumerate(planes):
            d = point_to_plane(p, pl)
            v, _ = residual_variance(WorldPoint(p, np.zeros((3, 3))), PlaneFeature(pl.n, pl.q, scale * pl.cov, 0, 100))
            if abs(d) <= 3 * np.sqrt(v) and d * d / v + np.log(v) < score:
                best, score = k, d * d / v + np.log(v)
        return best

    assert winner(1.0) == winner(4.0) == winner(0.25)


def test_extent_check():
    pl = flat_plane(radius=0.5)
    assert within_extent([1.4, 0.0, 0.2], pl)
    assert not within_extent([1.6, 0.0, 0.0], pl)


def test_empty_and_outside():
    vmap = VoxelMap.build(np.column_stack([rng_for(3, 0).uniform(0.1, 1.9, (100, 2)), np.ones(100)]))
    assert match_scan([], vmap=vmap) == []
    assert match_scan(np.full((5, 3), 50.0), np.zeros((5, 3, 3)), vmap) == []
    with pytest.raises(TypeError):
        match_scan([])


def simulated_pair():
    noise = SensorNoise()
    scene = room()
    pat = SphericalPattern(640, 16, np.deg2rad(-25), np.deg2rad(25))
    s0 = simulate_scan(scene, Pose(), noise, seed=1, pattern=pat)
    vmap = VoxelMap.build(s0.local_points, local_point_covs(s0.omega, s0.depth, noise))
    pose = Pose(so3_exp([0, 0, 0.1]), np.array([0.3, 0.2, 0.0]))
    s1 = simulate_scan(scene, pose, noise, seed=2, pattern=pat)
    lp = s1.local_points
    W = pose.transform(lp)
    WC = world_point_covs(lp, local_point_covs(s1.omega, s1.depth, noise), pose)
    return scene, vmap, s1, W, WC


def test_match_scan_equals_pointwise():
    _, vmap, _, W, WC = simulated_pair()
    idx = np.arange(0, len(W), 7)
    batch = match_scan(W[idx], WC[idx], vmap)
    single = [match_point(WorldPoint(W[i], WC[i]), vmap) for i in idx]
    assert len(batch) == sum(m is not None for m in single)
    it = iter(batch)
    for k, m in enumerate(single):
        if m is None:
            continue
        b = next(it)
        assert idx[b.index] == idx[k] and b.plane is m.plane
        assert b.distance == pytest.approx(m.distance, abs=1e-12)
        assert b.variance == pytest.approx(m.variance, rel=1e-9)


def test_gate_calibration_on_true_associations():
    scene, vmap, s1, W, WC = simulated_pair()
    inside = total = 0
    for i in range(0, len(W), 3):
        patch = scene.patches[s1.patch_id[i]]
        for pl in vmap.query(W[i]):
            # The map plane belongs to this point's surface.
            if abs(pl.n @ patch.normal) < np.cos(np.deg2rad(2.0)) or abs(patch.normal @ (pl.q - patch.corner)) > 0.05:
                continue
            var, _ = residual_variance(WorldPoint(W[i], WC[i]), pl)
            total += 1
            inside += abs(point_to_plane(W[i], pl)) <= 3 * np.sqrt(var)
    assert total > 1000
    assert 0.985 <= inside / total <= 1.0


def test_voxel_downsample_first_per_cell():
    P = np.array([[0.1, 0.1, 0.1], [0.2, 0.2, 0.2], [1.1, 0.0, 0.0], [-0.1, 0.0, 0.0]])
    assert list(voxel_downsample(P, 1.0)) == [0, 2, 3]
    assert list(voxel_downsample(P, 0.0)) == [0, 1, 2, 3]
