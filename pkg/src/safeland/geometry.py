"""Rigid transforms, pose tracks, pinhole projection and PnP.

Frame convention: ``T_a_b`` maps a point expressed in frame ``b`` into frame
``a``, i.e. ``p_a = T_a_b.apply(p_b)``.  A pose of a body in the world is
``T_w_body``.  Quaternions are stored scalar-first ``(w, x, y, z)``.
"""

from __future__ import annotations

import bisect
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    BehindCameraError,
    DegenerateGeometryError,
    IngestionError,
    InsufficientDataError,
    InvalidDepthError,
    OutOfRangeError,
    SchemaError,
)

SLERP_LINEAR_THRESHOLD = 1.0 - 1e-9


# ---------------------------------------------------------------------------
# quaternion helpers


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0.0 or not np.isfinite(n):
        raise ValueError("cannot normalize a zero or non-finite quaternion")
    return q / n


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conjugate(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R):
    """Shepperd's method; returns the quaternion with non-negative w."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = quat_normalize(q)
    return q if q[0] >= 0 else -q


def axis_angle_to_quat(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    h = 0.5 * angle
    return np.concatenate([[math.cos(h)], math.sin(h) * axis])


def rotvec_to_quat(v):
    v = np.asarray(v, dtype=float)
    angle = float(np.linalg.norm(v))
    if angle < 1e-12:
        return quat_normalize(np.concatenate([[1.0], 0.5 * v]))
    return axis_angle_to_quat(v / angle, angle)


def slerp(q0, q1, s):
    """Shortest-path spherical interpolation between unit quaternions."""
    q0 = np.asarray(q0, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    dot = float(np.dot(q0, q1))
    if dot < 0.0:
        q1 = -q1
        dot = -dot
    if dot > SLERP_LINEAR_THRESHOLD:
        return quat_normalize(q0 + s * (q1 - q0))
    theta = math.acos(min(dot, 1.0))
    sin_theta = math.sin(theta)
    w0 = math.sin((1.0 - s) * theta) / sin_theta
    w1 = math.sin(s * theta) / sin_theta
    return quat_normalize(w0 * q0 + w1 * q1)


def skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


# ---------------------------------------------------------------------------
# rigid transforms


@dataclass(frozen=True, eq=False)
class Transform:
    """Rigid-body transform with a unit-quaternion rotation."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = quat_normalize(self.rotation)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t.copy())

    @classmethod
    def identity(cls) -> "Transform":
        return cls()

    @classmethod
    def from_matrix(cls, R, t=(0.0, 0.0, 0.0)) -> "Transform":
        R = np.asarray(R, dtype=float)
        if R.shape == (4, 4):
            return cls(matrix_to_quat(R[:3, :3]), R[:3, 3])
        return cls(matrix_to_quat(R), t)

    @classmethod
    def from_rotvec(cls, rotvec, t=(0.0, 0.0, 0.0)) -> "Transform":
        return cls(rotvec_to_quat(rotvec), t)

    @classmethod
    def from_euler(cls, roll=0.0, pitch=0.0, yaw=0.0, t=(0.0, 0.0, 0.0), degrees=True) -> "Transform":
        """Z-Y-X (yaw, pitch, roll) convention, R = Rz(yaw) Ry(pitch) Rx(roll)."""
        if degrees:
            roll, pitch, yaw = (math.radians(a) for a in (roll, pitch, yaw))
        q = quat_multiply(
            axis_angle_to_quat([0, 0, 1], yaw),
            quat_multiply(axis_angle_to_quat([0, 1, 0], pitch), axis_angle_to_quat([1, 0, 0], roll)),
        )
        return cls(q, t)

    @classmethod
    def translate(cls, x, y=0.0, z=0.0) -> "Transform":
        return cls(translation=np.array([x, y, z], dtype=float))

    @property
    def matrix(self) -> np.ndarray:
        """Rotation matrix (3x3)."""
        return quat_to_matrix(self.rotation)

    def as_matrix(self) -> np.ndarray:
        """Homogeneous 4x4 matrix."""
        M = np.eye(4)
        M[:3, :3] = self.matrix
        M[:3, 3] = self.translation
        return M

    def compose(self, other: "Transform") -> "Transform":
        """``self ∘ other``: apply ``other`` first."""
        q = quat_multiply(self.rotation, other.rotation)
        t = self.matrix @ other.translation + self.translation
        return Transform(q, t)

    def __matmul__(self, other):
        if isinstance(other, Transform):
            return self.compose(other)
        return self.apply(other)

    def inverse(self) -> "Transform":
        qi = quat_conjugate(self.rotation)
        return Transform(qi, -(quat_to_matrix(qi) @ self.translation))

    def apply(self, points):
        """Transform a single 3-vector or an (N, 3) array."""
        p = np.asarray(points, dtype=float)
        return p @ self.matrix.T + self.translation

    def rotation_angle(self) -> float:
        """Rotation magnitude in radians."""
        return 2.0 * math.atan2(float(np.linalg.norm(self.rotation[1:])), abs(float(self.rotation[0])))

    def rotvec(self) -> np.ndarray:
        q = self.rotation if self.rotation[0] >= 0 else -self.rotation
        angle = 2.0 * math.atan2(np.linalg.norm(q[1:]), q[0])
        n = np.linalg.norm(q[1:])
        if n < 1e-15:
            return 2.0 * q[1:]
        return q[1:] / n * angle

    def euler(self, degrees=True):
        """(roll, pitch, yaw) matching :meth:`from_euler`."""
        R = self.matrix
        pitch = math.asin(max(-1.0, min(1.0, -R[2, 0])))
        roll = math.atan2(R[2, 1], R[2, 2])
        yaw = math.atan2(R[1, 0], R[0, 0])
        out = (roll, pitch, yaw)
        return tuple(math.degrees(a) for a in out) if degrees else out

    def __repr__(self):
        q = np.array2string(self.rotation, precision=6)
        t = np.array2string(self.translation, precision=6)
        return f"Transform(rotation={q}, translation={t})"


def pose_distance(a: Transform, b: Transform) -> tuple[float, float]:
    """(rotation angle in radians, translation distance in meters) between poses."""
    d = a.inverse().compose(b)
    return d.rotation_angle(), float(np.linalg.norm(a.translation - b.translation))


# ---------------------------------------------------------------------------
# pose tracks


@dataclass(frozen=True, eq=False)
class TimedPose:
    timestamp: float
    pose: Transform


class PoseTrack:
    """Time-indexed body-in-world poses with strictly increasing timestamps."""

    def __init__(self, poses: Iterable[TimedPose]):
        self.poses = list(poses)
        times = [p.timestamp for p in self.poses]
        for i in range(1, len(times)):
            if not times[i] > times[i - 1]:
                raise SchemaError(f"timestamps must be strictly increasing (index {i})", row=i)
        self._times = times

    @classmethod
    def from_arrays(cls, times, positions, quaternions) -> "PoseTrack":
        return cls(
            TimedPose(float(t), Transform(q, p)) for t, p, q in zip(times, positions, quaternions)
        )

    def __len__(self):
        return len(self.poses)

    @property
    def times(self):
        return np.array(self._times)

    @property
    def start(self) -> float:
        return self._times[0]

    @property
    def end(self) -> float:
        return self._times[-1]

    def spans(self, t0: float, t1: float | None = None) -> bool:
        if len(self.poses) < 2:
            return False
        t1 = t0 if t1 is None else t1
        return self.start <= min(t0, t1) and max(t0, t1) <= self.end

    def at(self, t: float) -> Transform:
        return interpolate_pose(self, t)

    def to_csv(self, path):
        write_pose_csv(path, self)


def interpolate_pose(track: PoseTrack, t: float) -> Transform:
    """Linear translation / slerp rotation between the bracketing poses."""
    if len(track) < 2:
        raise InsufficientDataError("pose track needs at least two entries")
    times = track._times
    if t < times[0] or t > times[-1]:
        raise OutOfRangeError(f"t={t} outside track span [{times[0]}, {times[-1]}]")
    i = bisect.bisect_right(times, t) - 1
    if i >= len(times) - 1:
        i = len(times) - 2
    a, b = track.poses[i], track.poses[i + 1]
    if t == a.timestamp:
        return a.pose
    if t == b.timestamp:
        return b.pose
    s = (t - a.timestamp) / (b.timestamp - a.timestamp)
    trans = (1.0 - s) * a.pose.translation + s * b.pose.translation
    return Transform(slerp(a.pose.rotation, b.pose.rotation, s), trans)


def relative_lidar_transform(T_li: Transform, pose_i0: Transform, pose_i1: Transform) -> Transform:
    """Transform taking LiDAR-frame points at t1 into the LiDAR frame at t0.

    ``T_li`` maps IMU coordinates into LiDAR coordinates; the poses are the IMU
    in the world at the two instants: T_l0_l1 = T_li · T_wi0⁻¹ · T_wi1 · T_li⁻¹.
    """
    return T_li.compose(pose_i0.inverse()).compose(pose_i1).compose(T_li.inverse())


# ---------------------------------------------------------------------------
# pinhole camera


@dataclass(frozen=True)
class CameraIntrinsics:
    focal: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not self.focal > 0:
            raise ValueError("focal must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if not (0 <= self.cx <= self.width - 1 and 0 <= self.cy <= self.height - 1):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def centered(cls, width: int, height: int, focal: float) -> "CameraIntrinsics":
        return cls(focal, (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    @property
    def principal(self):
        return (self.cx, self.cy)

    @property
    def shape(self):
        return (self.height, self.width)

    @property
    def matrix(self):
        return np.array([[self.focal, 0, self.cx], [0, self.focal, self.cy], [0, 0, 1.0]])

    def pixel_grid(self):
        """(u, v) float grids of pixel coordinates, each shaped (H, W)."""
        v, u = np.mgrid[0 : self.height, 0 : self.width].astype(float)
        return u, v

    def rays(self):
        """Per-pixel ray directions with unit z, shaped (H, W, 3)."""
        u, v = self.pixel_grid()
        return np.stack([(u - self.cx) / self.focal, (v - self.cy) / self.focal, np.ones_like(u)], axis=-1)

    def to_dict(self):
        return {"focal": self.focal, "cx": self.cx, "cy": self.cy, "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["focal"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class Correspondence:
    world_point: tuple
    pixel: tuple

    def __post_init__(self):
        if not (np.all(np.isfinite(self.world_point)) and np.all(np.isfinite(self.pixel))):
            raise ValueError("correspondence coordinates must be finite")


def project(point_cam, K: CameraIntrinsics) -> np.ndarray:
    """Continuous pixel coordinates of a camera-frame point (or (N, 3) array)."""
    p = np.asarray(point_cam, dtype=float)
    z = p[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("point lies on or behind the camera plane")
    u = K.focal * p[..., 0] / z + K.cx
    v = K.focal * p[..., 1] / z + K.cy
    return np.stack([u, v], axis=-1)


def backproject(pixel, plane_depth, K: CameraIntrinsics) -> np.ndarray:
    """Camera-frame point at the given plane depth (z) through a pixel."""
    px = np.asarray(pixel, dtype=float)
    z = np.asarray(plane_depth, dtype=float)
    if np.any(~(z > 0)):
        raise InvalidDepthError("plane depth must be positive")
    x = (px[..., 0] - K.cx) / K.focal * z
    y = (px[..., 1] - K.cy) / K.focal * z
    return np.stack([x, y, np.broadcast_to(z, x.shape)], axis=-1)


# ---------------------------------------------------------------------------
# PnP


@dataclass(frozen=True)
class PnPResult:
    transform: Transform
    reprojection_error: float
    iterations: int


def _dlt_pose(X, uv_norm):
    # Hartley-style normalization of the 3D points; image points are already
    # calibrated (K removed).
    centroid = X.mean(axis=0)
    Xc = X - centroid
    scale = math.sqrt(3.0) / max(np.sqrt((Xc**2).sum(axis=1)).mean(), 1e-300)
    Xn = Xc * scale
    n = len(X)
    A = np.zeros((2 * n, 12))
    Xh = np.hstack([Xn, np.ones((n, 1))])
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -uv_norm[:, [0]] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -uv_norm[:, [1]] * Xh
    _, s, Vt = np.linalg.svd(A)
    if s.size < 12 or s[-2] <= 1e-9 * s[0]:
        raise DegenerateGeometryError("correspondences do not constrain the linear PnP stage")
    P = Vt[-1].reshape(3, 4)
    # undo the 3D normalization: P_n [Xn;1] = P_n S [X;1]
    S = np.eye(4)
    S[:3, :3] *= scale
    S[:3, 3] = -scale * centroid
    P = P @ S
    if np.linalg.det(P[:, :3]) < 0:
        P = -P
    U, d, Vt2 = np.linalg.svd(P[:, :3])
    R = U @ Vt2
    t = P[:, 3] / d.mean()
    if np.mean((X @ R.T + t)[:, 2]) <= 0:
        raise DegenerateGeometryError("no pose places the points in front of the camera")
    return R, t


def _reprojection(R, t, X, uv, K):
    P = X @ R.T + t
    proj = np.empty((len(X), 2))
    proj[:, 0] = K.focal * P[:, 0] / P[:, 2] + K.cx
    proj[:, 1] = K.focal * P[:, 1] / P[:, 2] + K.cy
    return P, proj - uv


def solve_pnp(
    correspondences: Sequence[Correspondence], K: CameraIntrinsics, max_iterations: int = 50, step_tol: float = 1e-10
) -> PnPResult:
    """Camera-from-world pose via normalized DLT then Gauss-Newton refinement.

    Returns the transform mapping world (LiDAR) points into the camera frame,
    i.e. (R_c_l, t_c_l), together with the mean reprojection error in pixels.
    """
    if len(correspondences) < 6:
        raise InsufficientDataError(f"PnP needs at least 6 correspondences, got {len(correspondences)}")
    X = np.array([c.world_point for c in correspondences], dtype=float)
    uv = np.array([c.pixel for c in correspondences], dtype=float)
    uv_norm = np.column_stack([(uv[:, 0] - K.cx) / K.focal, (uv[:, 1] - K.cy) / K.focal])
    R, t = _dlt_pose(X, uv_norm)

    iterations = 0
    for iterations in range(1, max_iterations + 1):
        P, r = _reprojection(R, t, X, uv, K)
        x, y, z = P[:, 0], P[:, 1], P[:, 2]
        f = K.focal
        # d(proj)/dP, shape (n, 2, 3)
        dproj = np.zeros((len(X), 2, 3))
        dproj[:, 0, 0] = f / z
        dproj[:, 0, 2] = -f * x / z**2
        dproj[:, 1, 1] = f / z
        dproj[:, 1, 2] = -f * y / z**2
        # left perturbation: P' = exp(w) P + dt  ->  dP/dw = -[P]x, dP/dt = I
        J = np.zeros((len(X), 2, 6))
        for k in range(len(X)):
            J[k, :, :3] = dproj[k] @ -skew(P[k])
            J[k, :, 3:] = dproj[k]
        J = J.reshape(-1, 6)
        delta, *_ = np.linalg.lstsq(J, -r.reshape(-1), rcond=None)
        dR = quat_to_matrix(rotvec_to_quat(delta[:3]))
        R = dR @ R
        t = dR @ t + delta[3:]
        if np.linalg.norm(delta) < step_tol:
            break

    _, r = _reprojection(R, t, X, uv, K)
    err = float(np.mean(np.linalg.norm(r, axis=1)))
    return PnPResult(Transform.from_matrix(R, t), err, iterations)


# ---------------------------------------------------------------------------
# PoseTrack CSV


POSE_CSV_HEADER = ["t", "px", "py", "pz", "qw", "qx", "qy", "qz"]


def write_pose_csv(path, track: PoseTrack):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(POSE_CSV_HEADER)
        for tp in track.poses:
            w.writerow([repr(float(tp.timestamp))] + [repr(float(v)) for v in tp.pose.translation]
                       + [repr(float(v)) for v in tp.pose.rotation])


def read_pose_csv(path) -> PoseTrack:
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IngestionError(str(exc), path) from exc
    if not rows or [h.strip() for h in rows[0]] != POSE_CSV_HEADER:
        raise IngestionError(f"expected header {','.join(POSE_CSV_HEADER)}", path)
    poses = []
    last = -math.inf
    for i, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            vals = [float(v) for v in row]
        except ValueError as exc:
            raise IngestionError(f"row {i}: {exc}", path) from exc
        if len(vals) != 8:
            raise IngestionError(f"row {i}: expected 8 columns", path)
        if not vals[0] > last:
            raise SchemaError("timestamp not strictly increasing", path=path, row=i)
        last = vals[0]
        poses.append(TimedPose(vals[0], Transform(vals[4:8], vals[1:4])))
    return PoseTrack(poses)
