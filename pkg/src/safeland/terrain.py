"""Synthetic heightfield scenes, a ray caster, a stereo renderer and a safety oracle."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, InvalidPoseError
from .geometry import CameraIntrinsics, Transform
from .maps import DepthMap

MARCH_STEP = 0.05
BISECT_TOL = 1e-4
_LATTICE = 256
_LIGHT = np.array([0.35, 0.25, 1.0]) / np.linalg.norm([0.35, 0.25, 1.0])
TEXTURE_CONTRAST = 0.25

FEATURE_TYPES = ("plane", "step", "box", "flat_patch", "roughness")


# ---------------------------------------------------------------------------
# value noise


class _ValueNoise:
    """Seeded periodic value noise with a quintic fade (C2 continuous)."""

    def __init__(self, seed: int):
        rng = np.random.default_rng(seed)
        self.table = rng.uniform(-1.0, 1.0, size=(_LATTICE, _LATTICE))

    def __call__(self, x, y):
        fx = np.floor(x)
        fy = np.floor(y)
        tx = x - fx
        ty = y - fy
        ix = fx.astype(np.int64) % _LATTICE
        iy = fy.astype(np.int64) % _LATTICE
        ix1 = (ix + 1) % _LATTICE
        iy1 = (iy + 1) % _LATTICE
        sx = tx * tx * tx * (tx * (tx * 6 - 15) + 10)
        sy = ty * ty * ty * (ty * (ty * 6 - 15) + 10)
        T = self.table
        a = T[ix, iy] + sx * (T[ix1, iy] - T[ix, iy])
        b = T[ix, iy1] + sx * (T[ix1, iy1] - T[ix, iy1])
        return a + sy * (b - a)


def _fractal(noise, x, y, wavelength, octaves):
    total = np.zeros(np.broadcast(x, y).shape)
    norm = 0.0
    amp = 1.0
    freq = 1.0 / wavelength
    for k in range(octaves):
        # offset each octave so lattice points do not line up
        total = total + amp * noise(x * freq + 17.3 * k, y * freq - 11.9 * k)
        norm += amp
        amp *= 0.5
        freq *= 2.0
    return total / norm


# ---------------------------------------------------------------------------
# specs


@dataclass
class TerrainSpec:
    """Scene description: an extent and an ordered list of feature dicts.

    Feature dicts (``type`` key):

    * ``plane``: ``height``, ``slope`` (deg), ``azimuth`` (deg, uphill direction)
    * ``step``: ``position`` [x, y], ``azimuth`` (deg), ``height``, optional
      ``size`` (terrace depth in m; unbounded when omitted)
    * ``box``: ``center`` [x, y], ``size`` [sx, sy], ``height``
    * ``flat_patch``: ``center``, ``radius``, optional ``height`` (defaults to
      the height of the preceding features at the center); overrides them
    * ``roughness``: ``amplitude`` (m), ``octaves``, ``wavelength`` (m), ``seed``
    """

    extent: float = 40.0
    features: list = field(default_factory=lambda: [{"type": "plane", "height": 0.0}])
    texture_seed: int = 0
    texture: str = "noise"
    texture_wavelength: float = 2.0
    texture_octaves: int = 4

    def __post_init__(self):
        if not self.extent > 0:
            raise ConfigError("extent must be positive")
        if self.texture not in ("noise", "stripes", "flat"):
            raise ConfigError(f"unknown texture {self.texture!r}")
        for f in self.features:
            kind = f.get("type")
            if kind not in FEATURE_TYPES:
                raise ConfigError(f"unknown feature type {kind!r}")
            if kind == "roughness" and f.get("amplitude", 0.0) < 0:
                raise ConfigError("roughness amplitude must be >= 0")
            if kind == "flat_patch" and not f.get("radius", 0) > 0:
                raise ConfigError("flat_patch radius must be positive")

    def to_dict(self):
        return {
            "extent": self.extent,
            "features": self.features,
            "texture_seed": self.texture_seed,
            "texture": self.texture,
            "texture_wavelength": self.texture_wavelength,
            "texture_octaves": self.texture_octaves,
        }

    @classmethod
    def from_dict(cls, d):
        if "features" not in d or not isinstance(d["features"], list):
            raise ConfigError("terrain spec needs a 'features' array")
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


# ---------------------------------------------------------------------------
# terrain


class Terrain:
    """Immutable heightfield built from a :class:`TerrainSpec`."""

    def __init__(self, spec: TerrainSpec, seed: int = 0):
        self.spec = spec
        self.seed = seed
        self._noises = {}
        self._base_slope = (0.0, 0.0, 0.0)  # (height, gx, gy) of the first plane
        for f in spec.features:
            if f["type"] == "plane":
                self._base_slope = self._plane_coeffs(f)
                break
        self._patch_height = {}
        for i, f in enumerate(spec.features):
            if f["type"] == "roughness":
                self._noises[i] = _ValueNoise(int(f.get("seed", 0)) + 7919 * seed)
            elif f["type"] == "flat_patch":
                if "height" in f:
                    h = float(f["height"])
                else:
                    c = np.asarray(f["center"], dtype=float)
                    h = float(self._height(np.array([c[0]]), np.array([c[1]]), upto=i)[0])
                self._patch_height[i] = h
        self._texture_noise = _ValueNoise(10007 + int(spec.texture_seed))
        self._texture_gain = self._calibrate_texture()
        self._bounds = self._residual_bounds()

    # -- height ------------------------------------------------------------

    @staticmethod
    def _plane_coeffs(f):
        g = math.tan(math.radians(float(f.get("slope", 0.0))))
        az = math.radians(float(f.get("azimuth", 0.0)))
        return float(f.get("height", 0.0)), g * math.cos(az), g * math.sin(az)

    def _height(self, x, y, upto=None):
        h = np.zeros(np.broadcast(x, y).shape)
        feats = self.spec.features if upto is None else self.spec.features[:upto]
        for i, f in enumerate(feats):
            kind = f["type"]
            if kind == "plane":
                h0, gx, gy = self._plane_coeffs(f)
                h = h + h0 + gx * x + gy * y
            elif kind == "step":
                px, py = f.get("position", (0.0, 0.0))
                az = math.radians(float(f.get("azimuth", 0.0)))
                s = (x - px) * math.cos(az) + (y - py) * math.sin(az)
                inside = s >= 0
                if f.get("size") is not None:
                    inside &= s < float(f["size"])
                h = h + np.where(inside, float(f["height"]), 0.0)
            elif kind == "box":
                cx, cy = f["center"]
                sx, sy = f["size"]
                inside = (np.abs(x - cx) <= 0.5 * sx) & (np.abs(y - cy) <= 0.5 * sy)
                h = h + np.where(inside, float(f["height"]), 0.0)
            elif kind == "flat_patch":
                cx, cy = f["center"]
                r = float(f["radius"])
                inside = (x - cx) ** 2 + (y - cy) ** 2 <= r * r
                h = np.where(inside, self._patch_height[i], h)
            elif kind == "roughness":
                amp = float(f.get("amplitude", 0.0))
                if amp > 0:
                    n = _fractal(self._noises[i], x, y, float(f.get("wavelength", 1.0)), int(f.get("octaves", 3)))
                    h = h + amp * n
        return h

    def height_at(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        out = self._height(x, y)
        return float(out) if out.ndim == 0 else out

    def gradient_at(self, x, y, h=0.01):
        """Central-difference height gradient (dh/dx, dh/dy)."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        gx = (self._height(x + h, y) - self._height(x - h, y)) / (2 * h)
        gy = (self._height(x, y + h) - self._height(x, y - h)) / (2 * h)
        return gx, gy

    def normal_at(self, x, y):
        gx, gy = self.gradient_at(x, y)
        n = np.stack([-gx, -gy, np.ones_like(gx)], axis=-1)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def _base(self, x, y):
        h0, gx, gy = self._base_slope
        return h0 + gx * x + gy * y

    def _residual_bounds(self):
        # bounds of height minus the base plane, used to limit ray marching
        lo = hi = 0.0
        first_plane = True
        h0, gx, gy = self._base_slope
        for i, f in enumerate(self.spec.features):
            kind = f["type"]
            if kind == "plane":
                if first_plane:
                    first_plane = False
                    continue
                # additional planes are rare; bound them over the extent
                p0, px, py = self._plane_coeffs(f)
                span = (abs(px) + abs(py)) * self.spec.extent
                lo += p0 - span
                hi += p0 + span
            elif kind in ("step", "box"):
                v = float(f["height"])
                lo += min(v, 0.0)
                hi += max(v, 0.0)
            elif kind == "roughness":
                a = float(f.get("amplitude", 0.0))
                lo -= a
                hi += a
            elif kind == "flat_patch":
                cx, cy = f["center"]
                r = float(f["radius"])
                ph = self._patch_height[i] - (h0 + gx * cx + gy * cy)
                slack = math.hypot(gx, gy) * r
                lo = min(lo, ph - slack)
                hi = max(hi, ph + slack)
        return lo - 1e-3, hi + 1e-3

    # -- texture -----------------------------------------------------------

    def _raw_texture(self, x, y):
        spec = self.spec
        if spec.texture == "stripes":
            return np.sin(2 * np.pi * y / spec.texture_wavelength) + 0.0 * x
        if spec.texture == "flat":
            return np.zeros(np.broadcast(x, y).shape)
        return _fractal(self._texture_noise, x, y, spec.texture_wavelength, spec.texture_octaves)

    def _calibrate_texture(self):
        if self.spec.texture == "flat":
            return 0.0
        rng = np.random.default_rng(12345)
        pts = rng.uniform(-0.5 * self.spec.extent, 0.5 * self.spec.extent, size=(20000, 2))
        raw = self._raw_texture(pts[:, 0], pts[:, 1])
        std = float(np.std(raw))
        return TEXTURE_CONTRAST / std if std > 0 else 0.0

    def albedo_at(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        a = 0.5 + self._texture_gain * self._raw_texture(x, y)
        return np.clip(a, 0.02, 0.98)

    # -- ray casting -------------------------------------------------------

    def raycast(self, origins, directions, max_range=np.inf, step=MARCH_STEP, tol=BISECT_TOL):
        """Distance along each unit ray to the first surface hit (NaN on miss).

        Fixed-step marching restricted to the slab where the surface can lie,
        then bisection down to ``tol`` and a final secant step inside the
        bracket (exact for planar pieces).
        """
        o = np.atleast_2d(np.asarray(origins, dtype=float))
        d = np.atleast_2d(np.asarray(directions, dtype=float))
        o, d = np.broadcast_arrays(o, d)
        n = d.shape[0]
        out = np.full(n, np.nan)
        lo, hi = self._bounds
        h0, gx, gy = self._base_slope
        # f(s) = height above base plane along the ray
        f_o = o[:, 2] - (h0 + gx * o[:, 0] + gy * o[:, 1])
        f_d = d[:, 2] - (gx * d[:, 0] + gy * d[:, 1])
        with np.errstate(divide="ignore", invalid="ignore"):
            s_hi = np.where(f_d < 0, (hi - f_o) / f_d, np.where(f_o <= hi, 0.0, np.inf))
            s_lo = np.where(f_d < 0, (lo - f_o) / f_d, np.inf)
            # rising rays leave the slab for good once above its top
            s_exit = np.where(f_d > 0, (hi - f_o) / f_d, np.inf)
        s_start = np.maximum(s_hi, 0.0)
        # horizontal rays inside the slab would march forever; stop well past the scene
        s_end = np.minimum(np.minimum(s_lo, s_exit), min(max_range, 10.0 * self.spec.extent))
        active = np.flatnonzero(np.isfinite(s_start) & (s_start <= s_end))
        if active.size == 0:
            return out

        def residual(idx, s):
            p = o[idx] + s[:, None] * d[idx]
            return p[:, 2] - self._height(p[:, 0], p[:, 1])

        s_prev = s_start[active].copy()
        f_prev = residual(active, s_prev)
        hit0 = f_prev <= 0
        # rays starting inside the surface hit at their start
        out[active[hit0]] = s_prev[hit0]
        keep = ~hit0
        idx = active[keep]
        s_prev = s_prev[keep]
        f_prev = f_prev[keep]
        brackets_idx = []
        brackets = []
        while idx.size:
            s_next = np.minimum(s_prev + step, s_end[idx])
            f_next = residual(idx, s_next)
            hit = f_next <= 0
            if np.any(hit):
                brackets_idx.append(idx[hit])
                brackets.append((s_prev[hit], s_next[hit], f_prev[hit], f_next[hit]))
            done = hit | (s_next >= s_end[idx])
            idx = idx[~done]
            s_prev = s_next[~done]
            f_prev = f_next[~done]
        for bidx, (a, b, fa, fb) in zip(brackets_idx, brackets):
            a = a.copy()
            b = b.copy()
            fa = fa.copy()
            fb = fb.copy()
            while True:
                wide = (b - a) > tol
                if not np.any(wide):
                    break
                w = np.flatnonzero(wide)
                m = 0.5 * (a[w] + b[w])
                fm = residual(bidx[w], m)
                below = fm <= 0
                b[w[below]] = m[below]
                fb[w[below]] = fm[below]
                a[w[~below]] = m[~below]
                fa[w[~below]] = fm[~below]
            denom = fa - fb
            with np.errstate(divide="ignore", invalid="ignore"):
                sec = np.where(denom > 0, a + fa * (b - a) / denom, b)
            out[bidx] = np.clip(sec, a, b)
        out[out > max_range] = np.nan
        return out


def build_terrain(spec: TerrainSpec, seed: int = 0) -> Terrain:
    return Terrain(spec, seed)


# ---------------------------------------------------------------------------
# rendering


@dataclass(eq=False)
class RenderedFrame:
    image: np.ndarray
    true_depth: DepthMap
    pose: Transform
    timestamp: float
    K: CameraIntrinsics


def render_frame(terrain: Terrain, camera_pose: Transform, K: CameraIntrinsics, timestamp: float = 0.0) -> RenderedFrame:
    """Ray-cast one pinhole view; ``camera_pose`` is camera-in-world."""
    c = camera_pose.translation
    if c[2] <= terrain.height_at(c[0], c[1]):
        raise InvalidPoseError("camera is below the terrain surface")
    rays = K.rays().reshape(-1, 3)
    norms = np.linalg.norm(rays, axis=1)
    dirs_cam = rays / norms[:, None]
    dirs_w = dirs_cam @ camera_pose.matrix.T
    s = terrain.raycast(c[None, :], dirs_w)
    hit = np.isfinite(s)
    depth = np.full(rays.shape[0], np.nan)
    depth[hit] = s[hit] * dirs_cam[hit, 2]
    image = np.zeros(rays.shape[0])
    if np.any(hit):
        p = c + s[hit, None] * dirs_w[hit]
        n = terrain.normal_at(p[:, 0], p[:, 1])
        shade = np.clip(n @ _LIGHT, 0.0, None) / _LIGHT[2]
        image[hit] = np.clip(terrain.albedo_at(p[:, 0], p[:, 1]) * (0.3 + 0.7 * shade), 0.0, 1.0)
    H, W = K.shape
    return RenderedFrame(
        image=image.reshape(H, W),
        true_depth=DepthMap(depth.reshape(H, W), kind="plane"),
        pose=camera_pose,
        timestamp=timestamp,
        K=K,
    )


def nadir_camera_pose(x: float, y: float, z: float, yaw_deg: float = 0.0) -> Transform:
    """Camera-in-world pose looking straight down (image x along world x)."""
    base = Transform.from_matrix(np.diag([1.0, -1.0, -1.0]))
    return Transform.from_euler(yaw=yaw_deg, t=(x, y, z)).compose(base)


# ---------------------------------------------------------------------------
# safety oracle


class SafetyOracle:
    """Analytic ground-truth safety predicate over world (x, y).

    A point is safe when the slope angle atan|∇h| is below ``t_inc`` and the
    roughness angle atan(|∇²h|·baseline) is below ``t_tur``; a center is safe
    when every lattice sample of the surrounding disc of ``min_radius`` is.
    """

    def __init__(self, terrain: Terrain, t_inc: float, t_tur: float, min_radius: float,
                 spacing: float = 0.05, roughness_baseline: float = 0.1):
        if not (t_inc > 0 and t_tur > 0):
            raise ValueError("thresholds must be positive")
        self.terrain = terrain
        self.t_inc = t_inc
        self.t_tur = t_tur
        self.min_radius = min_radius
        self.spacing = spacing
        self.roughness_baseline = roughness_baseline
        r = int(math.ceil(min_radius / spacing))
        oy, ox = np.mgrid[-r : r + 1, -r : r + 1] * spacing
        keep = ox**2 + oy**2 <= min_radius**2 + 1e-12
        self._offsets = np.column_stack([ox[keep], oy[keep]])

    def pointwise_safe(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        h = self.spacing
        f = self.terrain._height
        c = f(x, y)
        xp, xm = f(x + h, y), f(x - h, y)
        yp, ym = f(x, y + h), f(x, y - h)
        gx = (xp - xm) / (2 * h)
        gy = (yp - ym) / (2 * h)
        lap = (xp + xm + yp + ym - 4 * c) / (h * h)
        slope = np.degrees(np.arctan(np.hypot(gx, gy)))
        rough = np.degrees(np.arctan(np.abs(lap) * self.roughness_baseline))
        return (slope < self.t_inc) & (rough < self.t_tur)

    def __call__(self, x, y) -> bool:
        pts = self._offsets + np.array([x, y], dtype=float)
        return bool(np.all(self.pointwise_safe(pts[:, 0], pts[:, 1])))

    def safe_center_grid(self, resolution: float = 0.1, half_extent: float | None = None):
        """(xs, ys, grid) where grid[j, i] tells whether (xs[i], ys[j]) is a safe center."""
        if half_extent is None:
            half_extent = 0.5 * self.terrain.spec.extent
        xs = np.arange(-half_extent, half_extent + 1e-9, resolution)
        X, Y = np.meshgrid(xs, xs)
        point_safe = self.pointwise_safe(X, Y)
        r = self.min_radius / resolution
        k = int(math.floor(r))
        yy, xx = np.mgrid[-k : k + 1, -k : k + 1]
        disc = xx**2 + yy**2 <= r * r
        centers = ndimage.binary_erosion(point_safe, structure=disc, border_value=0)
        return xs, xs, centers

    def distance_to_safe(self, x, y, resolution: float = 0.1) -> float:
        """Distance from (x, y) to the nearest safe center (inf when none)."""
        xs, ys, grid = self.safe_center_grid(resolution)
        if not grid.any():
            return math.inf
        jj, ii = np.nonzero(grid)
        return float(np.min(np.hypot(xs[ii] - x, ys[jj] - y)))


def safety_oracle(terrain: Terrain, t_inc: float, t_tur: float, min_radius: float) -> SafetyOracle:
    return SafetyOracle(terrain, t_inc, t_tur, min_radius)
