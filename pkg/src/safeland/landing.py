"""Landing-site selection: depth conversion, attitude correction, safety mask,
inscribed circle, candidate sizing, temporal confirmation and the flight
state machine."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ExcessiveTiltError, InvalidCenterError, InvalidTransitionError
from .geometry import CameraIntrinsics, Transform
from .maps import DepthMap


# ---------------------------------------------------------------------------
# depth conversions


def to_plane_depth(pred: DepthMap, K: CameraIntrinsics) -> DepthMap:
    """Ray-length depth to plane depth; plane-kind input is returned unchanged."""
    if pred.kind == "plane":
        return DepthMap(pred.grid.copy(), "plane")
    u, v = K.pixel_grid()
    scale = K.focal / np.sqrt((u - K.cx) ** 2 + (v - K.cy) ** 2 + K.focal**2)
    return DepthMap(pred.grid * scale, "plane")


def _splat_min(rows, cols, z, shape):
    H, W = shape
    out = np.full(H * W, np.nan)
    inside = (rows >= 0) & (rows < H) & (cols >= 0) & (cols < W)
    rows, cols, z = rows[inside], cols[inside], z[inside]
    if z.size == 0:
        return out.reshape(H, W)
    flat = rows * W + cols
    order = np.lexsort((z, flat))
    fs = flat[order]
    first = np.ones(fs.size, dtype=bool)
    first[1:] = fs[1:] != fs[:-1]
    out[fs[first]] = z[order][first]
    return out.reshape(H, W)


def correct_attitude(plane_depth: DepthMap, roll: float, pitch: float, K: CameraIntrinsics,
                     supersample: int = 2) -> DepthMap:
    """Re-render plane depth as seen by a level camera at the same position.

    ``roll`` / ``pitch`` (degrees) are the camera's tilt about its own x and y
    axes relative to the level (nadir) orientation.  Known pixels are split
    into ``supersample``² sub-samples, rotated into the level frame and
    z-buffer splatted to their nearest pixel.
    """
    if abs(roll) >= 60 or abs(pitch) >= 60:
        raise ExcessiveTiltError("roll and pitch must stay below 60 degrees")
    if roll == 0 and pitch == 0:
        return DepthMap(plane_depth.grid.copy(), plane_depth.kind)
    known = plane_depth.known
    n_known = int(known.sum())
    if n_known == 0:
        return DepthMap(plane_depth.grid.copy(), plane_depth.kind)
    R = Transform.from_euler(roll=roll, pitch=pitch).matrix
    vr, uc = np.nonzero(known)
    z = plane_depth.grid[vr, uc]
    s = max(1, int(supersample))
    off = (np.arange(s) + 0.5) / s - 0.5
    ou, ov = np.meshgrid(off, off)
    u = (uc[:, None] + ou.ravel()).ravel()
    v = (vr[:, None] + ov.ravel()).ravel()
    z = np.repeat(z, s * s)
    pts = np.column_stack([(u - K.cx) / K.focal * z, (v - K.cy) / K.focal * z, z])
    q = pts @ R.T
    front = q[:, 2] > 0
    q = q[front]
    tu = K.focal * q[:, 0] / q[:, 2] + K.cx
    tv = K.focal * q[:, 1] / q[:, 2] + K.cy
    out = _splat_min(np.floor(tv + 0.5).astype(np.int64), np.floor(tu + 0.5).astype(np.int64), q[:, 2], plane_depth.shape)
    if np.isfinite(out).sum() < 0.5 * n_known:
        raise ExcessiveTiltError("more than half of the depth map is lost after attitude correction")
    return DepthMap(out, "plane")


# ---------------------------------------------------------------------------
# safety mask


@dataclass(eq=False)
class SafetyMask:
    raw: np.ndarray
    refined: np.ndarray
    t_inc: float
    t_tur: float
    slope_deg: np.ndarray | None = None
    roughness_deg: np.ndarray | None = None

    def stats(self) -> dict:
        return {
            "raw_safe_fraction": float(self.raw.mean()),
            "refined_safe_fraction": float(self.refined.mean()),
            "t_inc": self.t_inc,
            "t_tur": self.t_tur,
        }


def disc_structure(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return xx**2 + yy**2 <= r * r


def open_close(mask: np.ndarray, radius: int) -> np.ndarray:
    """Opening then closing with a disc; outside the image counts as unsafe
    for the erosion of the opening and as neutral for the closing."""
    if radius <= 0:
        return mask.copy()
    st = disc_structure(radius)
    opened = ndimage.binary_dilation(ndimage.binary_erosion(mask, st, border_value=0), st, border_value=0)
    closed = ndimage.binary_erosion(ndimage.binary_dilation(opened, st, border_value=0), st, border_value=1)
    return closed


def _fill_unknown(z: np.ndarray) -> np.ndarray:
    known = np.isfinite(z)
    if known.all():
        return z
    idx = ndimage.distance_transform_edt(~known, return_distances=False, return_indices=True)
    return z[tuple(idx)]


def safety_mask(pred_c: DepthMap, K: CameraIntrinsics, t_inc: float = 10.0, t_tur: float = 10.0,
                morph_radius: int = 2, smoothing: float = 1.0) -> SafetyMask:
    """Slope / roughness angles from a level plane-depth map.

    Slope is the angle between the optical axis and the normal of the
    back-projected surface (central differences); roughness is
    atan(|∇²z| / pitch) with the 5-point Laplacian and metric pixel pitch
    depth/f.
    ``smoothing`` is the std (pixels) of a Gaussian pre-filter that keeps
    range noise from reading as roughness; 0 disables it.  Unknown pixels,
    and known ones within the filter reach of them, are unsafe.
    """
    if not (0 < t_inc < 90 and 0 < t_tur < 90):
        raise ValueError("thresholds must lie in (0, 90) degrees")
    known = pred_c.known
    H, W = pred_c.shape
    if not known.any():
        z = np.zeros((H, W))
        empty = np.zeros((H, W), dtype=bool)
        return SafetyMask(empty, empty.copy(), t_inc, t_tur, z, z)
    # odd reflection continues planes linearly past the image border
    pad = int(math.ceil(4 * smoothing)) + 1
    z = np.pad(_fill_unknown(pred_c.grid), pad, mode="reflect", reflect_type="odd")
    if smoothing > 0:
        z = ndimage.gaussian_filter(z, smoothing, mode="nearest")
    u, v = K.pixel_grid()
    u = np.pad(u, pad, mode="reflect", reflect_type="odd")
    v = np.pad(v, pad, mode="reflect", reflect_type="odd")
    zv, zu = np.gradient(z)
    # tangent vectors of the back-projected surface along image u and v
    du = np.stack([(z + (u - K.cx) * zu) / K.focal, (v - K.cy) * zu / K.focal, zu])
    dv = np.stack([(u - K.cx) * zv / K.focal, (z + (v - K.cy) * zv) / K.focal, zv])
    n = np.cross(du, dv, axis=0)
    slope = np.degrees(np.arctan2(np.hypot(n[0], n[1]), np.abs(n[2])))
    lap = ndimage.laplace(z)
    rough = np.degrees(np.arctan(np.abs(lap) / (z / K.focal)))
    # derivatives next to unknown pixels see filled values; distrust them
    reach = int(math.ceil(2 * smoothing)) + 1
    trusted = ndimage.binary_erosion(known, disc_structure(reach), border_value=1)
    inner = (slice(pad, pad + H), slice(pad, pad + W))
    slope, rough = slope[inner], rough[inner]
    raw = trusted & (slope < t_inc) & (rough < t_tur)
    refined = open_close(raw, morph_radius) & known
    return SafetyMask(raw, refined, t_inc, t_tur, slope, rough)


# ---------------------------------------------------------------------------
# inscribed circle and candidates


def clearance(mask: np.ndarray) -> np.ndarray:
    """Euclidean distance (pixels) from each safe pixel to the nearest unsafe
    pixel, the image outside counting as unsafe."""
    padded = np.pad(np.asarray(mask, dtype=bool), 1, constant_values=False)
    return ndimage.distance_transform_edt(padded)[1:-1, 1:-1]


def largest_inscribed_circle(mask: np.ndarray):
    """``((row, col), radius_px)`` of the largest disc in the safe region, or None."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return None
    d = clearance(mask)
    i = int(np.argmax(d))  # first maximum in row-major order
    r, c = divmod(i, mask.shape[1])
    return (r, c), float(d[r, c])


@dataclass
class LandingCandidate:
    center_px: tuple
    radius_px: float
    center_plane_depth: float
    radius_m: float
    world_position: np.ndarray

    def to_dict(self):
        return {
            "center_px": [int(self.center_px[0]), int(self.center_px[1])],
            "radius_px": self.radius_px,
            "center_plane_depth": self.center_plane_depth,
            "radius_m": self.radius_m,
            "world_position": [float(v) for v in self.world_position],
        }


def make_candidate(center_px, radius_px, pred_c: DepthMap, K: CameraIntrinsics, camera_pose: Transform,
                   min_radius_m: float = 2.0):
    """Size the disc with R = p / f · r; None unless R > ``min_radius_m``."""
    r, c = int(center_px[0]), int(center_px[1])
    H, W = pred_c.shape
    if not (0 <= r < H and 0 <= c < W):
        raise InvalidCenterError("center lies outside the depth map")
    p = float(pred_c.grid[r, c])
    if not np.isfinite(p):
        raise InvalidCenterError("depth unknown at the candidate center")
    R = p / K.focal * radius_px
    if not R > min_radius_m:
        return None
    cam = np.array([(c - K.cx) / K.focal * p, (r - K.cy) / K.focal * p, p])
    return LandingCandidate((r, c), float(radius_px), p, R, camera_pose.apply(cam))


# ---------------------------------------------------------------------------
# temporal confirmation


class TrackerDecision(str, enum.Enum):
    CONFIRMED = "confirmed"
    PENDING = "pending"
    LOST_TIMEOUT = "lost-timeout"


@dataclass
class CandidateTracker:
    last_candidate: LandingCandidate | None = None
    consecutive_confirms: int = 0
    last_confirm_time: float = 0.0
    association_radius: float = 1.0
    required: int = 5
    timeout: float = 5.0


def update_tracker(tracker: CandidateTracker, candidate: LandingCandidate | None, now: float) -> TrackerDecision:
    """Advance the streak; a departed or missing candidate restarts it."""
    if candidate is None:
        tracker.consecutive_confirms = 0
        tracker.last_candidate = None
    else:
        prev = tracker.last_candidate
        same = prev is not None and float(np.linalg.norm(candidate.world_position - prev.world_position)) <= tracker.association_radius
        if same:
            tracker.consecutive_confirms += 1
            # keep following the freshest estimate of the same site
        else:
            tracker.consecutive_confirms = 1
        tracker.last_candidate = candidate
    if tracker.consecutive_confirms >= tracker.required:
        tracker.last_confirm_time = now
        return TrackerDecision.CONFIRMED
    if now - tracker.last_confirm_time > tracker.timeout:
        tracker.last_confirm_time = now
        return TrackerDecision.LOST_TIMEOUT
    return TrackerDecision.PENDING


# ---------------------------------------------------------------------------
# state machine


class LandingState(str, enum.Enum):
    SELECT_SITE = "select-site"
    DESCEND = "descend"
    CONFIRM_SITE = "confirm-site"
    FINAL_DESCEND = "final-descend"
    LANDED = "landed"
    WANDER = "wander"
    ABORT = "abort"


class Event(str, enum.Enum):
    CONFIRMED = "confirmed"
    PENDING = "pending"
    LOST_TIMEOUT = "lost-timeout"
    DEPTH_READY = "depth-ready"
    CONFIRM_PASS = "confirm-pass"
    CONFIRM_FAIL = "confirm-fail"
    ALTITUDE_BELOW_THRESHOLD = "altitude-below-threshold"
    TOUCHDOWN = "touchdown"
    PATH_EXHAUSTED = "path-exhausted"


S, E = LandingState, Event
TRANSITIONS = {
    (S.SELECT_SITE, E.DEPTH_READY): (S.SELECT_SITE, "evaluate-site"),
    (S.SELECT_SITE, E.PENDING): (S.SELECT_SITE, "hover"),
    (S.SELECT_SITE, E.CONFIRMED): (S.DESCEND, "goto-site"),
    (S.SELECT_SITE, E.LOST_TIMEOUT): (S.WANDER, "next-waypoint"),
    (S.WANDER, E.DEPTH_READY): (S.WANDER, "evaluate-site"),
    (S.WANDER, E.PENDING): (S.WANDER, "hover"),
    (S.WANDER, E.CONFIRMED): (S.DESCEND, "goto-site"),
    (S.WANDER, E.LOST_TIMEOUT): (S.WANDER, "next-waypoint"),
    (S.WANDER, E.PATH_EXHAUSTED): (S.ABORT, "abort"),
    (S.DESCEND, E.PENDING): (S.DESCEND, "continue-descent"),
    (S.DESCEND, E.ALTITUDE_BELOW_THRESHOLD): (S.CONFIRM_SITE, "hover-dense-lidar"),
    (S.CONFIRM_SITE, E.CONFIRM_PASS): (S.FINAL_DESCEND, "final-descent"),
    (S.CONFIRM_SITE, E.CONFIRM_FAIL): (S.SELECT_SITE, "reselect"),
    (S.FINAL_DESCEND, E.PENDING): (S.FINAL_DESCEND, "continue-descent"),
    (S.FINAL_DESCEND, E.TOUCHDOWN): (S.LANDED, "disarm"),
}
del S, E


def step_state_machine(state: LandingState, event) -> tuple[LandingState, str]:
    """Apply one event; illegal (state, event) pairs raise InvalidTransitionError."""
    state = LandingState(state)
    event = Event(event)
    try:
        return TRANSITIONS[(state, event)]
    except KeyError:
        raise InvalidTransitionError(f"no transition from {state.value} on {event.value}") from None


class WanderPlanner:
    """Seeded boustrophedon sweep over a square grid; each cell is visited once."""

    def __init__(self, extent: float, cell_size: float, seed: int = 0, start=(0.0, 0.0)):
        n = max(1, int(math.floor(extent / cell_size)))
        self.n = n
        self.cell_size = extent / n
        self.half = 0.5 * extent
        rng = np.random.default_rng(seed)
        transpose = bool(rng.integers(2))
        flip_rows = bool(rng.integers(2))
        flip_cols = bool(rng.integers(2))
        order = []
        for i in range(n):
            cols = list(range(n))
            if i % 2 == 1:
                cols.reverse()
            for j in cols:
                order.append((i, j))
        cells = []
        for i, j in order:
            if flip_rows:
                i = n - 1 - i
            if flip_cols:
                j = n - 1 - j
            cells.append((j, i) if transpose else (i, j))
        self.visited: set = set()
        self._queue = cells
        self.mark_visited(self.cell_of(*start))

    def cell_of(self, x, y):
        i = int(np.clip(math.floor((y + self.half) / self.cell_size), 0, self.n - 1))
        j = int(np.clip(math.floor((x + self.half) / self.cell_size), 0, self.n - 1))
        return (i, j)

    def center(self, cell):
        i, j = cell
        return (-self.half + (j + 0.5) * self.cell_size, -self.half + (i + 0.5) * self.cell_size)

    def mark_visited(self, cell):
        self.visited.add(cell)

    def next_waypoint(self):
        """Center (x, y) of the next unvisited cell, or None when exhausted."""
        while self._queue:
            cell = self._queue.pop(0)
            if cell not in self.visited:
                self.visited.add(cell)
                return self.center(cell)
        return None
