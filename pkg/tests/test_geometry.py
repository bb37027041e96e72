import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from safeland.errors import (
    BehindCameraError,
    DegenerateGeometryError,
    InsufficientDataError,
    InvalidDepthError,
    OutOfRangeError,
    SchemaError,
)
from safeland.geometry import (
    CameraIntrinsics,
    Correspondence,
    PoseTrack,
    TimedPose,
    Transform,
    backproject,
    interpolate_pose,
    pose_distance,
    project,
    quat_multiply,
    quat_to_matrix,
    read_pose_csv,
    relative_lidar_transform,
    slerp,
    solve_pnp,
    write_pose_csv,
)

from conftest import random_transform, transforms


def close(a, b, tol=1e-9):
    ang, dist = pose_distance(a, b)
    return ang < tol and dist < tol


# -- group laws ------------------------------------------------------------


@given(transforms())
def test_compose_with_inverse_is_identity(T):
    I = T.compose(T.inverse())
    assert I.rotation_angle() < 1e-9
    assert np.linalg.norm(I.translation) < 1e-9


@given(transforms(), transforms(), transforms())
def test_composition_is_associative(a, b, c):
    assert close(a.compose(b).compose(c), a.compose(b.compose(c)))


@given(transforms(), transforms())
def test_quaternions_stay_unit(a, b):
    for T in (a.compose(b), a.inverse(), Transform(slerp(a.rotation, b.rotation, 0.3))):
        assert abs(np.linalg.norm(T.rotation) - 1) < 1e-9


@given(transforms(), st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_compose_matches_matrix_product(a, p):
    b = a.inverse().compose(Transform.from_euler(10, 20, 30, t=(1, 2, 3)))
    M = a.as_matrix() @ b.as_matrix()
    ph = np.append(p, 1.0)
    assert np.allclose(a.compose(b).apply(p), (M @ ph)[:3], atol=1e-9)


def test_quaternion_product_matches_matrix_product(rng):
    for _ in range(50):
        q1, q2 = rng.normal(size=4), rng.normal(size=4)
        q1 /= np.linalg.norm(q1)
        q2 /= np.linalg.norm(q2)
        assert np.allclose(quat_to_matrix(quat_multiply(q1, q2)), quat_to_matrix(q1) @ quat_to_matrix(q2), atol=1e-12)


def test_matrix_roundtrip(rng):
    for _ in range(100):
        T = random_transform(rng)
        assert close(Transform.from_matrix(T.as_matrix()), T)


def test_euler_roundtrip():
    T = Transform.from_euler(roll=12.0, pitch=-33.0, yaw=140.0)
    assert np.allclose(T.euler(), (12.0, -33.0, 140.0), atol=1e-9)


def test_rotvec_roundtrip(rng):
    for _ in range(50):
        v = rng.normal(size=3)
        v *= rng.uniform(0, 3.0) / np.linalg.norm(v)
        assert np.allclose(Transform.from_rotvec(v).rotvec(), v, atol=1e-9)


def test_rotation_angle_precise_near_identity():
    T = Transform.from_rotvec([1e-9, 0, 0])
    assert abs(T.rotation_angle() - 1e-9) < 1e-18


# -- slerp / interpolation --------------------------------------------------


def test_slerp_endpoints(rng):
    for _ in range(100):
        a, b = random_transform(rng), random_transform(rng)
        q0 = slerp(a.rotation, b.rotation, 0.0)
        q1 = slerp(a.rotation, b.rotation, 1.0)
        assert close(Transform(q0), Transform(a.rotation))
        assert close(Transform(q1), Transform(b.rotation))


def test_slerp_takes_short_path():
    a = Transform.from_euler(yaw=10)
    b = Transform.from_euler(yaw=350)
    mid = Transform(slerp(a.rotation, -b.rotation, 0.5))
    assert abs(mid.euler()[2]) < 1e-9


def test_slerp_nearly_equal_rotations_uses_linear_fallback():
    a = Transform.from_rotvec([0, 0, 1e-12])
    q = slerp(np.array([1.0, 0, 0, 0]), a.rotation, 0.5)
    assert np.all(np.isfinite(q))
    assert abs(np.linalg.norm(q) - 1) < 1e-12


def test_interpolate_first_timestamp_exact():
    a = Transform.from_euler(5, 6, 7, t=(1, 2, 3))
    b = Transform.from_euler(-5, 2, 90, t=(4, 5, 6))
    track = PoseTrack([TimedPose(1.0, a), TimedPose(2.0, b)])
    got = interpolate_pose(track, 1.0)
    assert np.array_equal(got.rotation, a.rotation)
    assert np.array_equal(got.translation, a.translation)


def test_interpolate_translation_midpoint():
    track = PoseTrack([TimedPose(0.0, Transform.identity()), TimedPose(1.0, Transform.translate(2, 0, 0))])
    got = interpolate_pose(track, 0.5)
    assert np.allclose(got.translation, [1, 0, 0], atol=1e-12)
    assert got.rotation_angle() < 1e-12


def test_interpolate_yaw_midpoint():
    track = PoseTrack([TimedPose(0.0, Transform.identity()), TimedPose(1.0, Transform.from_euler(yaw=90))])
    got = interpolate_pose(track, 0.5)
    assert abs(got.euler()[2] - 45.0) < 1e-9


def test_interpolate_is_continuous(rng):
    poses = [TimedPose(float(i), random_transform(rng)) for i in range(5)]
    track = PoseTrack(poses)
    for t in rng.uniform(0, 3.999, 50):
        ang, d = pose_distance(track.at(t), track.at(t + 1e-6))
        assert ang < 1e-4 and d < 1e-4


def test_interpolate_out_of_range_and_short_track():
    track = PoseTrack([TimedPose(0.0, Transform.identity()), TimedPose(1.0, Transform.identity())])
    with pytest.raises(OutOfRangeError):
        interpolate_pose(track, 1.5)
    with pytest.raises(InsufficientDataError):
        interpolate_pose(PoseTrack([TimedPose(0.0, Transform.identity())]), 0.0)


def test_track_requires_increasing_timestamps():
    with pytest.raises(SchemaError):
        PoseTrack([TimedPose(1.0, Transform.identity()), TimedPose(1.0, Transform.identity())])


# -- LiDAR chain ----------------------------------------------------------


def test_chain_stationary_is_identity(rng):
    T_li = random_transform(rng)
    pose = random_transform(rng)
    rel = relative_lidar_transform(T_li, pose, pose)
    assert rel.rotation_angle() < 1e-12 and np.linalg.norm(rel.translation) < 1e-12


def test_chain_collapses_for_identity_extrinsics():
    rel = relative_lidar_transform(Transform.identity(), Transform.identity(), Transform.translate(0, 0, -1))
    assert close(rel, Transform.translate(0, 0, -1), 1e-15)


def test_chain_equals_world_route(rng):
    for _ in range(200):
        T_li, p0, p1 = random_transform(rng), random_transform(rng), random_transform(rng)
        x = rng.uniform(-20, 20, 3)
        via_chain = relative_lidar_transform(T_li, p0, p1).apply(x)
        # l1 -> imu1 -> world -> imu0 -> l0, one step at a time
        world = p1.apply(T_li.inverse().apply(x))
        via_world = T_li.apply(p0.inverse().apply(world))
        assert np.allclose(via_chain, via_world, atol=1e-9)


# -- projection -----------------------------------------------------------


def test_project_optical_axis():
    K = CameraIntrinsics(100.0, 160.0, 120.0, 320, 240)
    assert np.allclose(project([0, 0, 5], K), [160, 120])


def test_project_substitution():
    K = CameraIntrinsics(100.0, 160.0, 120.0, 320, 240)
    assert np.allclose(project([1, 0, 2], K), [210, 120])


def test_project_behind_camera():
    K = CameraIntrinsics(100.0, 160.0, 120.0, 320, 240)
    with pytest.raises(BehindCameraError):
        project([0, 0, -1], K)


def test_backproject_principal_point():
    K = CameraIntrinsics(100.0, 160.0, 120.0, 320, 240)
    assert np.allclose(backproject([160, 120], 5.0, K), [0, 0, 5])


def test_backproject_roundtrip(rng):
    K = CameraIntrinsics(100.0, 160.0, 120.0, 320, 240)
    px = rng.uniform(0, 320, (100, 2))
    z = rng.uniform(0.5, 50, 100)
    assert np.allclose(project(backproject(px, z, K), K), px, atol=1e-9)


def test_backproject_rejects_nonpositive_depth():
    K = CameraIntrinsics(100.0, 160.0, 120.0, 320, 240)
    with pytest.raises(InvalidDepthError):
        backproject([1, 1], 0.0, K)


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(-1.0, 10, 10, 20, 20)
    with pytest.raises(ValueError):
        CameraIntrinsics(10.0, 30, 10, 20, 20)


# -- PnP ------------------------------------------------------------------

CALIB_K = CameraIntrinsics(500.0, 320.0, 240.0, 640, 480)


def synth_correspondences(rng, T, n=30, noise=0.0):
    out = []
    while len(out) < n:
        pc = np.array([rng.uniform(-2.5, 2.5), rng.uniform(-2, 2), rng.uniform(3, 8)])
        uv = project(pc, CALIB_K) + rng.normal(0, noise, 2) if noise else project(pc, CALIB_K)
        out.append(Correspondence(tuple(T.inverse().apply(pc)), tuple(uv)))
    return out


def calib_pose(rng):
    return Transform.from_euler(*rng.uniform(-30, 30, 3), t=rng.uniform(-0.3, 0.3, 3))


def test_pnp_noiseless_exact(rng):
    for _ in range(20):
        T = calib_pose(rng)
        res = solve_pnp(synth_correspondences(rng, T), CALIB_K)
        ang, d = pose_distance(res.transform, T)
        assert ang < 1e-6 and d < 1e-6
        assert res.reprojection_error < 1e-6


def test_pnp_with_pixel_noise(rng):
    for _ in range(20):
        T = calib_pose(rng)
        res = solve_pnp(synth_correspondences(rng, T, noise=0.5), CALIB_K)
        ang, d = pose_distance(res.transform, T)
        assert math.degrees(ang) < 0.5 and d < 0.02


def test_pnp_needs_six_points(rng):
    with pytest.raises(InsufficientDataError):
        solve_pnp(synth_correspondences(rng, Transform.identity(), n=4), CALIB_K)


def test_pnp_degenerate_collinear():
    pts = [Correspondence((float(i), 0.0, 5.0), (320.0 + 100 * i / 5, 240.0)) for i in range(8)]
    with pytest.raises(DegenerateGeometryError):
        solve_pnp(pts, CALIB_K)


# -- pose CSV -----------------------------------------------------------


def test_pose_csv_roundtrip(tmp_path, rng):
    track = PoseTrack([TimedPose(0.1 * i, random_transform(rng)) for i in range(10)])
    write_pose_csv(tmp_path / "p.csv", track)
    back = read_pose_csv(tmp_path / "p.csv")
    for a, b in zip(track.poses, back.poses):
        assert a.timestamp == b.timestamp
        assert np.array_equal(a.pose.translation, b.pose.translation)
        assert np.allclose(a.pose.rotation, b.pose.rotation, atol=1e-15)


def test_pose_csv_decreasing_timestamp_names_row(tmp_path):
    p = tmp_path / "p.csv"
    p.write_text("t,px,py,pz,qw,qx,qy,qz\n0,0,0,0,1,0,0,0\n1,0,0,0,1,0,0,0\n0.5,0,0,0,1,0,0,0\n")
    with pytest.raises(SchemaError) as exc:
        read_pose_csv(p)
    assert exc.value.row == 4
