"""Simulated non-repetitive (rosette) LiDAR scanning against synthetic terrain.

The sensor looks along its +z axis; directions are parametrized as

    off-axis angle  = fov_half * |sin(2π a t)|
    azimuth         = 2π b t

with two incommensurate rates a, b.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .depth_fusion import interpolate_poses
from .errors import EmptyIntervalError, IngestionError, OutOfRangeError, SchemaError
from .geometry import PoseTrack


@dataclass(frozen=True)
class ScanPattern:
    fov_half_angle: float = 19.2
    petal_rate_a: float = 23.7
    petal_rate_b: float = 14.4
    points_per_second: float = 100_000.0

    def __post_init__(self):
        if not 0 < self.fov_half_angle < 90:
            raise ValueError("fov_half_angle must lie in (0, 90) degrees")
        if self.petal_rate_a <= 0 or self.petal_rate_b <= 0:
            raise ValueError("petal rates must be positive")
        if self.points_per_second <= 0:
            raise ValueError("points_per_second must be positive")
        ratio = self.petal_rate_a / self.petal_rate_b
        for q in range(1, 7):
            if abs(ratio * q - round(ratio * q)) < 1e-9:
                raise ValueError("petal rates form a small-integer ratio; the pattern would repeat")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: float(v) for k, v in d.items() if k in cls.__dataclass_fields__})

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(eq=False)
class PointCloud:
    """Timestamped returns in the sensor frame."""

    times: np.ndarray
    points: np.ndarray
    intensity: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.intensity = np.asarray(self.intensity, dtype=float).reshape(-1)
        if not (len(self.times) == len(self.points) == len(self.intensity)):
            raise ValueError("point cloud columns must have equal length")

    def __len__(self):
        return len(self.times)

    @classmethod
    def empty(cls):
        return cls(np.zeros(0), np.zeros((0, 3)), np.zeros(0))

    def select(self, mask) -> "PointCloud":
        return PointCloud(self.times[mask], self.points[mask], self.intensity[mask])

    def window(self, t0, t1) -> "PointCloud":
        """Points with t0 <= t < t1."""
        return self.select((self.times >= t0) & (self.times < t1))

    @classmethod
    def concatenate(cls, clouds) -> "PointCloud":
        clouds = list(clouds)
        if not clouds:
            return cls.empty()
        return cls(
            np.concatenate([c.times for c in clouds]),
            np.concatenate([c.points for c in clouds]),
            np.concatenate([c.intensity for c in clouds]),
        )


@dataclass(frozen=True)
class CoverageReport:
    integration_time: float
    covered_fraction: float


def _count(pattern: ScanPattern, t0: float, t1: float) -> int:
    return int(round(pattern.points_per_second * (t1 - t0)))


def scan_times(pattern: ScanPattern, t0: float, t1: float) -> np.ndarray:
    if not t1 > t0:
        raise EmptyIntervalError("scan interval must have t1 > t0")
    return t0 + np.arange(_count(pattern, t0, t1)) / pattern.points_per_second


def _angles(pattern: ScanPattern, t):
    theta = math.radians(pattern.fov_half_angle) * np.abs(np.sin(2 * np.pi * pattern.petal_rate_a * t))
    phi = 2 * np.pi * pattern.petal_rate_b * t
    return theta, phi


def scan_directions(pattern: ScanPattern, t0: float, t1: float):
    """Return ``(timestamps, unit directions (N, 3))`` for the interval."""
    t = scan_times(pattern, t0, t1)
    theta, phi = _angles(pattern, t)
    st = np.sin(theta)
    dirs = np.column_stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)])
    return t, dirs


def coverage(pattern: ScanPattern, integration_time: float, grid: int = 32) -> CoverageReport:
    """Fraction of angular-grid cells inside the FOV disc hit at least once.

    The grid spans [-fov, fov]² over (θ·cos φ, θ·sin φ); a cell belongs to the
    FOV when its center lies inside the disc of radius fov.
    """
    if not integration_time > 0:
        raise ValueError("integration_time must be positive")
    fov = math.radians(pattern.fov_half_angle)
    edges = np.linspace(-fov, fov, grid + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    cx, cy = np.meshgrid(centers, centers)
    inside = cx**2 + cy**2 <= fov**2
    n = _count(pattern, 0.0, integration_time)
    if n == 0:
        return CoverageReport(integration_time, 0.0)
    t = np.arange(n) / pattern.points_per_second
    theta, phi = _angles(pattern, t)
    hist, _, _ = np.histogram2d(theta * np.sin(phi), theta * np.cos(phi), bins=[edges, edges])
    frac = float(((hist > 0) & inside).sum() / inside.sum())
    return CoverageReport(integration_time, frac)


def sample_cloud(terrain, sensor_track: PoseTrack, pattern: ScanPattern, t0: float, t1: float,
                 noise_sigma: float = 0.0, max_range: float = 260.0, seed: int = 0) -> PointCloud:
    """Ray-cast the scan against ``terrain`` from poses interpolated on ``sensor_track``.

    ``sensor_track`` holds LiDAR-in-world poses.  Range noise is additive
    Gaussian; misses and hits beyond ``max_range`` are dropped.
    """
    if not max_range > 0:
        raise ValueError("max_range must be positive")
    if not sensor_track.spans(t0, t1):
        raise OutOfRangeError(f"sensor track does not span [{t0}, {t1}]")
    t, dirs = scan_directions(pattern, t0, t1)
    if t.size == 0:
        return PointCloud.empty()
    R, p = interpolate_poses(sensor_track, t)
    dirs_w = np.einsum("nij,nj->ni", R, dirs)
    rng = np.random.default_rng(seed)
    s = terrain.raycast(p, dirs_w, max_range=max_range)
    noise = rng.normal(0.0, noise_sigma, size=t.size) if noise_sigma > 0 else np.zeros(t.size)
    hit = np.isfinite(s)
    rng_meas = s + noise
    hit &= (rng_meas > 0) & (rng_meas <= max_range)
    pts = dirs[hit] * rng_meas[hit, None]
    hw = p[hit] + s[hit, None] * dirs_w[hit]
    n = terrain.normal_at(hw[:, 0], hw[:, 1])
    intensity = np.clip(np.abs(np.einsum("ij,ij->i", n, dirs_w[hit])), 0.0, 1.0)
    return PointCloud(t[hit], pts, intensity)


# ---------------------------------------------------------------------------
# CSV export / import

CLOUD_CSV_HEADER = ["t", "x", "y", "z", "intensity"]


def write_cloud_csv(path, cloud: PointCloud):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CLOUD_CSV_HEADER)
        for t, (x, y, z), i in zip(cloud.times, cloud.points, cloud.intensity):
            w.writerow([repr(float(t)), repr(float(x)), repr(float(y)), repr(float(z)), repr(float(i))])


def read_cloud_csv(path) -> PointCloud:
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IngestionError(str(exc), path) from exc
    if not rows:
        return PointCloud.empty()
    if [h.strip() for h in rows[0]] != CLOUD_CSV_HEADER:
        raise IngestionError(f"expected header {','.join(CLOUD_CSV_HEADER)}", path)
    data = []
    last = -math.inf
    for i, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            vals = [float(v) for v in row]
        except ValueError as exc:
            raise IngestionError(f"row {i}: {exc}", path) from exc
        if len(vals) != 5:
            raise IngestionError(f"row {i}: expected 5 columns", path)
        if vals[0] < last:
            raise SchemaError("timestamps must be non-decreasing", path=path, row=i)
        last = vals[0]
        data.append(vals)
    if not data:
        return PointCloud.empty()
    arr = np.array(data)
    return PointCloud(arr[:, 0], arr[:, 1:4], arr[:, 4])
