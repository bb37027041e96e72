"""Motion-compensated LiDAR accumulation, sparse rasterization and NN densification."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyInputError, InsufficientDataError, OutOfRangeError
from .geometry import CameraIntrinsics, PoseTrack, Transform
from .maps import DepthMap, SparseDepth


def interpolate_poses(track: PoseTrack, times) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized pose interpolation: rotation matrices (N,3,3) and translations (N,3).

    Same rule as :func:`geometry.interpolate_pose` (linear translation,
    shortest-path slerp, linear fallback for nearly equal rotations).
    """
    times = np.asarray(times, dtype=float)
    tt = track.times
    if len(tt) < 2:
        raise InsufficientDataError("pose track needs at least two entries")
    if times.size and (times.min() < tt[0] or times.max() > tt[-1]):
        raise OutOfRangeError(f"timestamps outside track span [{tt[0]}, {tt[-1]}]")
    i = np.clip(np.searchsorted(tt, times, side="right") - 1, 0, len(tt) - 2)
    s = (times - tt[i]) / (tt[i + 1] - tt[i])
    P = np.array([p.pose.translation for p in track.poses])
    Q = np.array([p.pose.rotation for p in track.poses])
    trans = (1 - s)[:, None] * P[i] + s[:, None] * P[i + 1]
    q0 = Q[i]
    q1 = Q[i + 1].copy()
    dot = np.einsum("ij,ij->i", q0, q1)
    neg = dot < 0
    q1[neg] *= -1
    dot = np.abs(dot)
    lin = dot > 1.0 - 1e-9
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        st = np.sin(theta)
        w0 = np.where(lin, 1 - s, np.sin((1 - s) * theta) / st)
        w1 = np.where(lin, s, np.sin(s * theta) / st)
    q = w0[:, None] * q0 + w1[:, None] * q1
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    R = np.empty((len(q), 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R, trans


def align_points(cloud, imu_track: PoseTrack, T_li: Transform, T_cl: Transform, t0: float):
    """Express every LiDAR return in the camera frame at time ``t0``.

    Each point measured at t1 goes l1 → l0 through
    T_li · T_wi0⁻¹ · T_wi(t1) · T_li⁻¹ (poses interpolated from the IMU track),
    then l0 → camera through ``T_cl``.  Points at or behind the camera plane
    are dropped.  Returns ``(timestamps (N,), points (N, 3))``.
    """
    times = np.asarray(cloud.times, dtype=float)
    pts = np.asarray(cloud.points, dtype=float).reshape(-1, 3)
    if times.size == 0:
        return np.zeros(0), np.zeros((0, 3))
    if not imu_track.spans(t0):
        raise OutOfRangeError(f"reference time {t0} outside the IMU track")
    R1, p1 = interpolate_poses(imu_track, times)
    T_wi0 = imu_track.at(t0)
    T_il = T_li.inverse()
    # LiDAR point -> IMU(t1) -> world
    p_i = T_il.apply(pts)
    p_w = np.einsum("nij,nj->ni", R1, p_i) + p1
    # world -> camera(t0) in one composite transform
    T_c_w = T_cl.compose(T_li).compose(T_wi0.inverse())
    p_c = T_c_w.apply(p_w)
    front = p_c[:, 2] > 0
    return times[front], p_c[front]


@dataclass
class AccumulationBuffer:
    """Append-only store of camera-frame points relative to one reference time."""

    reference_time: float = 0.0
    times: list = field(default_factory=list)
    points: list = field(default_factory=list)

    def extend(self, times, points_cam):
        times = np.asarray(times, dtype=float)
        points_cam = np.asarray(points_cam, dtype=float).reshape(-1, 3)
        if times.shape[0] != points_cam.shape[0]:
            raise ValueError("times and points must have the same length")
        if times.size:
            self.times.append(times)
            self.points.append(points_cam)

    def reset(self, reference_time: float):
        self.reference_time = reference_time
        self.times = []
        self.points = []

    def __len__(self):
        return int(sum(len(t) for t in self.times))

    def snapshot(self):
        """Immutable copies ``(times, points)`` of everything accumulated so far."""
        if not self.times:
            return np.zeros(0), np.zeros((0, 3))
        return np.concatenate(self.times), np.concatenate(self.points)


def rasterize_sparse(points_cam, K: CameraIntrinsics, times=None, reference_time: float = 0.0) -> SparseDepth:
    """Project points to their nearest pixel and keep, per pixel, the one
    acquired closest in time to ``reference_time``; stores plane depth z."""
    pts = np.asarray(points_cam, dtype=float).reshape(-1, 3)
    H, W = K.shape
    out = SparseDepth.empty((H, W), reference_time)
    if pts.shape[0] == 0:
        return out
    if times is None:
        times = np.full(pts.shape[0], reference_time)
    times = np.asarray(times, dtype=float)
    front = pts[:, 2] > 0
    pts, times = pts[front], times[front]
    u = K.focal * pts[:, 0] / pts[:, 2] + K.cx
    v = K.focal * pts[:, 1] / pts[:, 2] + K.cy
    iu = np.floor(u + 0.5).astype(np.int64)
    iv = np.floor(v + 0.5).astype(np.int64)
    inside = (iu >= 0) & (iu < W) & (iv >= 0) & (iv < H)
    iu, iv, z, times = iu[inside], iv[inside], pts[inside, 2], times[inside]
    if z.size == 0:
        return out
    flat = iv * W + iu
    gap = np.abs(times - reference_time)
    # earliest-offset wins; ties keep input order (stable sort)
    order = np.lexsort((gap, flat))
    fs = flat[order]
    first = np.ones(fs.size, dtype=bool)
    first[1:] = fs[1:] != fs[:-1]
    sel = order[first]
    grid = out.grid.ravel()
    st = out.source_time.ravel()
    grid[flat[sel]] = z[sel]
    st[flat[sel]] = times[sel]
    return SparseDepth(grid.reshape(H, W), st.reshape(H, W), reference_time)


def nn_interpolate(sparse: SparseDepth, fov_mask=None) -> DepthMap:
    """Nearest-valid-pixel fill inside ``fov_mask``; unknown outside it.

    Distances are Euclidean in pixels; equidistant candidates resolve to the
    smaller row, then the smaller column.
    """
    valid = sparse.valid
    if not valid.any():
        raise EmptyInputError("sparse depth has no valid pixel")
    H, W = sparse.shape
    if fov_mask is None:
        fov_mask = np.ones((H, W), dtype=bool)
    fov_mask = np.asarray(fov_mask, dtype=bool)
    vr, vc = np.nonzero(valid)  # row-major: already ordered by (row, col)
    src = np.column_stack([vr, vc])
    qr, qc = np.nonzero(fov_mask)
    out = np.full((H, W), np.nan)
    if qr.size == 0:
        return DepthMap(out, "plane")
    tree = cKDTree(src)
    k = min(8, len(src))
    dist, idx = tree.query(np.column_stack([qr, qc]), k=k)
    if k == 1:
        dist = dist[:, None]
        idx = idx[:, None]
    # exact integer squared distances for tie detection
    d2 = (vr[idx] - qr[:, None]) ** 2 + (vc[idx] - qc[:, None]) ** 2
    best = d2.min(axis=1)
    cand = np.where(d2 == best[:, None], idx, np.iinfo(np.int64).max)
    choice = cand.min(axis=1)  # smallest index == smallest (row, col)
    # if all k neighbours tie the k-th might not be the last tie; fall back
    if k < len(src):
        crowded = np.flatnonzero(d2[:, -1] == best)
        for j in crowded:
            r = math.sqrt(best[j]) + 1e-9
            ids = tree.query_ball_point([qr[j], qc[j]], r)
            ids = [i for i in ids if (vr[i] - qr[j]) ** 2 + (vc[i] - qc[j]) ** 2 == best[j]]
            choice[j] = min(ids)
    out[qr, qc] = sparse.grid[vr[choice], vc[choice]]
    return DepthMap(out, "plane")


def fov_mask_from_cone(K: CameraIntrinsics, half_angle_deg: float, T_cl: Transform | None = None) -> np.ndarray:
    """Pixels whose viewing ray falls inside the LiDAR cone.

    The cone axis is the LiDAR +z axis expressed in the camera frame; the
    lever arm between the sensors is ignored (far-field approximation).
    """
    axis = np.array([0.0, 0.0, 1.0])
    if T_cl is not None:
        axis = T_cl.matrix @ axis
    rays = K.rays()
    rays = rays / np.linalg.norm(rays, axis=-1, keepdims=True)
    cosang = rays @ axis
    return cosang >= math.cos(math.radians(half_angle_deg))
