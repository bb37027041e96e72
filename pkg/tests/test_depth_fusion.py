import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from safeland.depth_fusion import (
    AccumulationBuffer,
    align_points,
    fov_mask_from_cone,
    interpolate_poses,
    nn_interpolate,
    rasterize_sparse,
)
from safeland.errors import EmptyInputError, OutOfRangeError
from safeland.geometry import CameraIntrinsics, PoseTrack, TimedPose, Transform, interpolate_pose
from safeland.lidar_sim import PointCloud, ScanPattern, sample_cloud
from safeland.maps import SparseDepth
from safeland.terrain import TerrainSpec, build_terrain, render_frame

from conftest import random_transform

K = CameraIntrinsics.centered(64, 64, 96.0)


def cloud_of(times, pts):
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    return PointCloud(times, pts, np.ones(len(pts)))


# -- alignment ----------------------------------------------------------------


def test_vectorized_interpolation_matches_scalar(rng):
    track = PoseTrack([TimedPose(float(i), random_transform(rng)) for i in range(6)])
    ts = rng.uniform(0, 5, 40)
    R, p = interpolate_poses(track, ts)
    for k, t in enumerate(ts):
        T = interpolate_pose(track, t)
        assert np.allclose(R[k], T.matrix, atol=1e-12)
        assert np.allclose(p[k], T.translation, atol=1e-12)


def test_stationary_alignment_is_extrinsic(rng):
    pose = random_transform(rng)
    track = PoseTrack([TimedPose(0.0, pose), TimedPose(1.0, pose)])
    T_li, T_cl = random_transform(rng, 0.2), Transform.translate(0, 0.05, 0)
    pts = rng.uniform(-3, 3, (50, 3)) + [0, 0, 10]
    t, pc = align_points(cloud_of(np.linspace(0, 1, 50), pts), track, T_li, T_cl, 0.5)
    assert np.allclose(pc, T_cl.apply(pts), atol=1e-12)
    assert len(t) == 50


@pytest.mark.parametrize("direction", [1.0, -1.0])
def test_pure_translation_shifts_points(direction):
    track = PoseTrack([TimedPose(0.0, Transform.identity()),
                       TimedPose(1.0, Transform.translate(0, 0, direction))])
    pts = np.array([[0.5, 0.2, 5.0], [-1.0, 0.3, 7.0]])
    # points measured at t1 = 1, expressed at t0 = 0: shift by the motion in between
    _, pc = align_points(cloud_of([1.0, 1.0], pts), track, Transform.identity(), Transform.identity(), 0.0)
    assert np.allclose(pc, pts + [0, 0, direction], atol=1e-12)


def test_alignment_drops_points_behind_camera():
    track = PoseTrack([TimedPose(0.0, Transform.identity()), TimedPose(1.0, Transform.identity())])
    t, pc = align_points(cloud_of([0.1, 0.2], [[0, 0, 2], [0, 0, -2]]), track,
                         Transform.identity(), Transform.identity(), 0.5)
    assert len(pc) == 1


def test_alignment_out_of_range():
    track = PoseTrack([TimedPose(0.0, Transform.identity()), TimedPose(1.0, Transform.identity())])
    with pytest.raises(OutOfRangeError):
        align_points(cloud_of([1.5], [[0, 0, 1]]), track, Transform.identity(), Transform.identity(), 0.5)
    with pytest.raises(OutOfRangeError):
        align_points(cloud_of([0.5], [[0, 0, 1]]), track, Transform.identity(), Transform.identity(), 2.0)


def _descent_rig():
    # IMU x forward, y left, z up; camera looks down; LiDAR shares the camera axes 5 cm away
    T_ic = Transform.from_matrix(np.diag([1.0, -1.0, -1.0]))
    T_cl = Transform.translate(0.0, 0.05, 0.0)
    T_ci = T_ic.inverse()
    T_li = T_cl.inverse().compose(T_ci)
    imu = PoseTrack([TimedPose(0.0, Transform.from_euler(yaw=0, t=(0, 0, 12.0))),
                     TimedPose(1.0, Transform.from_euler(roll=3, yaw=10, t=(0.5, 0.3, 11.0)))])
    return imu, T_li, T_cl, T_ic


def test_end_to_end_descent_matches_truth():
    terrain = build_terrain(TerrainSpec(features=[{"type": "plane", "slope": 6.0, "azimuth": 20.0}]))
    imu, T_li, T_cl, T_ic = _descent_rig()
    lidar_track = PoseTrack([TimedPose(p.timestamp, p.pose.compose(T_li.inverse())) for p in imu.poses])
    sigma = 0.02
    cloud = sample_cloud(terrain, lidar_track, ScanPattern(), 0.0, 1.0, noise_sigma=sigma, seed=4)
    t0 = 1.0
    ts, pc = align_points(cloud, imu, T_li, T_cl, t0)
    sparse = rasterize_sparse(pc, K, ts, t0)
    truth = render_frame(terrain, imu.at(t0).compose(T_ic), K).true_depth.grid
    v = sparse.valid
    err = np.abs(sparse.grid[v] - truth[v])
    assert v.sum() > 500
    assert np.mean(err <= 3 * sigma + 0.02) >= 0.99
    assert np.sqrt(np.mean(err**2)) <= 3 * sigma + 0.02


# -- rasterization ------------------------------------------------------------


def test_single_point_on_axis():
    sp = rasterize_sparse([[0.0, 0.0, 5.0]], CameraIntrinsics(100.0, 20.0, 10.0, 40, 30))
    assert sp.count == 1
    assert sp.grid[10, 20] == 5.0


def test_collision_keeps_nearest_in_time():
    K1 = CameraIntrinsics(100.0, 20.0, 10.0, 40, 30)
    sp = rasterize_sparse([[0, 0, 5.0], [0, 0, 6.0]], K1, times=[0.9, 0.1], reference_time=0.0)
    assert sp.grid[10, 20] == 6.0
    assert sp.source_time[10, 20] == 0.1


def test_random_points_membership(rng):
    pts = np.column_stack([rng.uniform(-4, 4, 10_000), rng.uniform(-4, 4, 10_000), rng.uniform(2, 20, 10_000)])
    sp = rasterize_sparse(pts, K, rng.uniform(0, 1, 10_000), 0.5)
    zs = set(pts[:, 2].tolist())
    assert sp.count <= len(pts)
    assert all(z in zs for z in sp.grid[sp.valid])
    assert np.all(sp.grid[sp.valid] > 0)


def test_empty_rasterization():
    sp = rasterize_sparse(np.zeros((0, 3)), K)
    assert sp.count == 0 and sp.density == 0.0


def test_accumulation_buffer():
    buf = AccumulationBuffer(reference_time=1.0)
    buf.extend([0.1, 0.2], [[0, 0, 1], [0, 0, 2]])
    buf.extend([], np.zeros((0, 3)))
    t, p = buf.snapshot()
    p[0, 2] = 99.0
    assert len(buf) == 2 and buf.snapshot()[1][0, 2] == 1.0
    buf.reset(2.0)
    assert len(buf) == 0 and buf.reference_time == 2.0


# -- nearest-neighbor fill ------------------------------------------------------


def brute_nn(grid, fov):
    H, W = grid.shape
    vr, vc = np.nonzero(np.isfinite(grid))
    out = np.full((H, W), np.nan)
    for r in range(H):
        for c in range(W):
            if fov[r, c]:
                d2 = (vr - r) ** 2 + (vc - c) ** 2
                k = np.flatnonzero(d2 == d2.min())[0]  # row-major order: smaller row, then column
                out[r, c] = grid[vr[k], vc[k]]
    return out


def test_single_pixel_gives_constant():
    g = np.full((10, 12), np.nan)
    g[3, 4] = 7.0
    d = nn_interpolate(SparseDepth(g))
    assert np.all(d.grid == 7.0)


def test_opposite_corners_voronoi():
    g = np.full((9, 9), np.nan)
    g[0, 0], g[8, 8] = 1.0, 2.0
    d = nn_interpolate(SparseDepth(g)).grid
    r, c = np.mgrid[0:9, 0:9]
    near_first = r + c < 8
    assert np.all(d[near_first] == 1.0) and np.all(d[r + c > 8] == 2.0)
    # on the bisector the smaller row wins, which is always the first corner
    assert np.all(d[r + c == 8] == 1.0)


@given(st.integers(0, 2**31 - 1), st.floats(0.01, 0.6))
def test_nn_matches_brute_force(seed, density):
    rng = np.random.default_rng(seed)
    g = np.where(rng.random((14, 11)) < density, rng.integers(1, 5, (14, 11)).astype(float), np.nan)
    if not np.isfinite(g).any():
        g[0, 0] = 1.0
    fov = rng.random((14, 11)) < 0.8
    got = nn_interpolate(SparseDepth(g), fov).grid
    assert np.array_equal(np.isnan(got), ~fov)
    assert np.array_equal(got[fov], brute_nn(g, fov)[fov])


def test_nn_ties_in_crowded_neighbourhood():
    # a ring of 12 equidistant samples around the center: more ties than queried neighbours
    g = np.full((11, 11), np.nan)
    for r, c in [(0, 5), (10, 5), (5, 0), (5, 10), (2, 1), (1, 2), (8, 1), (9, 2), (1, 8), (2, 9), (8, 9), (9, 8)]:
        g[r, c] = 1.0 + r + 0.01 * c
    got = nn_interpolate(SparseDepth(g)).grid
    assert np.array_equal(got, brute_nn(g, np.ones_like(g, dtype=bool)))


def test_nn_exact_on_valid_and_idempotent(rng):
    g = rng.uniform(1, 10, (20, 20))
    g[rng.random((20, 20)) < 0.5] = np.nan
    d = nn_interpolate(SparseDepth(g)).grid
    v = np.isfinite(g)
    assert np.array_equal(d[v], g[v])
    assert np.array_equal(nn_interpolate(SparseDepth(d)).grid, d)


def test_nn_empty_input():
    with pytest.raises(EmptyInputError):
        nn_interpolate(SparseDepth.empty((4, 4)))


def test_fov_mask_cone():
    m = fov_mask_from_cone(K, 19.2)
    assert m[32, 32] and not m[0, 0]
    # 19.2 deg at f = 96 -> radius about 33 px
    r = np.hypot(*np.mgrid[0:64, 0:64] - 31.5)
    assert np.all(m[r < 32]) and not np.any(m[r > 34])
