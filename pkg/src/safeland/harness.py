"""Closed-loop landing episodes, synthetic flight logs, sparse-depth dataset
export and metric aggregation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import io
from .depth_fusion import AccumulationBuffer, align_points, fov_mask_from_cone, nn_interpolate, rasterize_sparse
from .errors import ConfigError, EmptyInputError, IngestionError, SchemaError
from .geometry import CameraIntrinsics, PoseTrack, TimedPose, Transform, read_pose_csv, write_pose_csv
from .image_quality import evaluate_prediction
from .landing import (
    CandidateTracker,
    Event,
    LandingState,
    SafetyMask,
    WanderPlanner,
    clearance,
    correct_attitude,
    largest_inscribed_circle,
    make_candidate,
    safety_mask,
    step_state_machine,
    to_plane_depth,
    update_tracker,
)
from .lidar_sim import PointCloud, ScanPattern, read_cloud_csv, sample_cloud, write_cloud_csv
from .maps import DepthMap, SparseDepth
from .predictor import (
    LidarPacket,
    LossWeights,
    PredictionContext,
    RefineOptions,
    StereoFrame,
    compute_metrics,
    dynamic_completion,
    predict,
)
from .terrain import SafetyOracle, Terrain, TerrainSpec, build_terrain, render_frame

log = logging.getLogger(__name__)

DENSITY_BUCKETS = (0.0, 0.1, 0.3, 0.5, 1.0)

# camera looks down the body -z axis; image x along body x
T_IMU_CAM = Transform.from_matrix(np.diag([1.0, -1.0, -1.0]))


# ---------------------------------------------------------------------------
# configuration


@dataclass
class EpisodeConfig:
    terrain: dict = field(default_factory=lambda: TerrainSpec().to_dict())
    start: tuple = (0.0, 0.0)
    yaw: float = 0.0
    altitude: float = 15.0
    confirm_altitude: float = 8.0
    camera: dict = field(default_factory=lambda: {"width": 64, "height": 64, "focal": 96.0})
    baseline: float = 0.08
    lidar_offset: tuple = (0.0, 0.05, 0.0)  # LiDAR origin in the camera frame
    scan_pattern: dict = field(default_factory=lambda: ScanPattern().to_dict())
    lidar_noise: float = 0.02
    image_noise: float = 0.0
    max_range: float = 100.0
    # lighter smoothing keeps the edges of small flat sites sharp in the safety mask
    weights: dict = field(default_factory=lambda: {**asdict(LossWeights()), "alpha_s": 0.5})
    refine_iters: int = 30
    supersample: int = 4
    t_inc: float = 10.0
    t_tur: float = 10.0
    min_radius_m: float = 2.0
    oracle_radius: float | None = None
    mask_smoothing: float = 0.0
    confirm_smoothing: float = 1.0
    morph_radius: int = 2
    deadline: float = 1.0
    perception_period: float = 0.25
    confirm_window: float = 1.0
    horizontal_speed: float = 2.0
    descent_speed: float = 1.0
    camera_rate: float = 20.0
    lidar_rate: float = 10.0
    frame_budget: int = 3000
    wander_cell: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.camera_rate <= 0 or self.lidar_rate <= 0:
            raise ConfigError("frame rates must be positive")
        if self.baseline <= 0:
            raise ConfigError("stereo baseline must be positive")
        if self.confirm_altitude >= self.altitude:
            raise ConfigError("confirm altitude must lie below the cruise altitude")
        if self.confirm_altitude <= 0 or self.horizontal_speed <= 0 or self.descent_speed <= 0:
            raise ConfigError("altitudes and speeds must be positive")
        if self.frame_budget <= 0:
            raise ConfigError("frame budget must be positive")
        if self.deadline < 0 or self.confirm_window <= 0:
            raise ConfigError("deadline must be >= 0 and confirm window > 0")
        self.start = tuple(float(v) for v in self.start)
        self.lidar_offset = tuple(float(v) for v in self.lidar_offset)

    def to_dict(self):
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v) for f in fields(self)}

    @classmethod
    def from_dict(cls, d, base_dir=None):
        """Build from JSON data.  ``terrain`` may be a spec dict, a path to a
        spec file, or ``{"scenario": name}`` for :func:`scenario_terrain`."""
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        ter = d.get("terrain")
        if isinstance(ter, str):
            p = Path(ter)
            if base_dir is not None and not p.is_absolute():
                p = Path(base_dir) / p
            d["terrain"] = TerrainSpec.load(p).to_dict()
        elif isinstance(ter, dict) and "scenario" in ter:
            d["terrain"] = scenario_terrain(ter["scenario"], int(ter.get("seed", d.get("seed", 0))))
        return cls(**d)

    @classmethod
    def load(cls, path):
        path = Path(path)
        return cls.from_dict(io.read_json(path), base_dir=path.parent)

    # derived objects

    def intrinsics(self) -> CameraIntrinsics:
        c = self.camera
        if "cx" in c:
            return CameraIntrinsics(float(c["focal"]), float(c["cx"]), float(c["cy"]), int(c["width"]), int(c["height"]))
        return CameraIntrinsics.centered(int(c["width"]), int(c["height"]), float(c["focal"]))

    def pattern(self) -> ScanPattern:
        return ScanPattern.from_dict(self.scan_pattern)

    def T_rl(self) -> Transform:
        return Transform.translate(-self.baseline, 0.0, 0.0)

    def T_cl(self) -> Transform:
        return Transform.translate(*self.lidar_offset)

    def T_li(self) -> Transform:
        return T_IMU_CAM.compose(self.T_cl()).inverse()


# ---------------------------------------------------------------------------
# sensors


class SensorRig:
    """Stereo camera, LiDAR and IMU rigidly mounted on a kinematic vehicle."""

    def __init__(self, terrain: Terrain, config: EpisodeConfig, rng: np.random.Generator):
        self.terrain = terrain
        self.config = config
        self.K = config.intrinsics()
        self.pattern = config.pattern()
        self.T_rl = config.T_rl()
        self.T_cl = config.T_cl()
        self.T_li = config.T_li()
        self.T_il = self.T_li.inverse()
        self.fov = fov_mask_from_cone(self.K, self.pattern.fov_half_angle, self.T_cl)
        self.rng = rng

    @staticmethod
    def body_pose(pos, yaw) -> Transform:
        return Transform.from_euler(yaw=yaw, t=pos)

    def camera_pose(self, body: Transform) -> Transform:
        return body.compose(T_IMU_CAM)

    def stereo(self, body: Transform, t: float):
        left_pose = self.camera_pose(body)
        left = render_frame(self.terrain, left_pose, self.K, t)
        right = render_frame(self.terrain, left_pose.compose(self.T_rl.inverse()), self.K, t)
        sigma = self.config.image_noise
        li, ri = left.image, right.image
        if sigma > 0:
            li = np.clip(li + self.rng.normal(0, sigma, li.shape), 0, 1)
            ri = np.clip(ri + self.rng.normal(0, sigma, ri.shape), 0, 1)
        return left, li, ri

    def lidar_track(self, imu_track: PoseTrack) -> PoseTrack:
        return PoseTrack([TimedPose(p.timestamp, p.pose.compose(self.T_il)) for p in imu_track.poses])

    def scan(self, imu_track: PoseTrack, t0: float, t1: float) -> PointCloud:
        seed = int(self.rng.integers(2**31))
        return sample_cloud(self.terrain, self.lidar_track(imu_track), self.pattern, t0, t1,
                            self.config.lidar_noise, self.config.max_range, seed)

    def packets(self, imu_track: PoseTrack, t0: float, horizon: float):
        """Yield camera-frame LiDAR packets at the packet rate, lazily."""
        period = 1.0 / self.config.lidar_rate
        n = int(math.ceil(horizon / period - 1e-9))
        for k in range(1, n + 1):
            cloud = self.scan(imu_track, t0 + (k - 1) * period, t0 + k * period)
            times, pts = align_points(cloud, imu_track, self.T_li, self.T_cl, t0)
            yield LidarPacket(k * period, times, pts)


def _hover_track(body: Transform, t0: float, horizon: float) -> PoseTrack:
    return PoseTrack([TimedPose(t0 - 1.0, body), TimedPose(t0 + horizon + 1.0, body)])


# ---------------------------------------------------------------------------
# episode


@dataclass
class EpisodeReport:
    outcome: str
    touchdown: list | None
    distance_to_safe: float | None
    mean_accumulation_time: float
    max_accumulation_time: float
    frames: list
    trajectory: list
    frames_used: int
    states: list
    seed: int
    config_hash: str

    def to_dict(self):
        return asdict(self)


class _Episode:
    def __init__(self, config: EpisodeConfig, observer=None):
        self.cfg = config
        self.observer = observer
        self.rng = np.random.default_rng(config.seed)
        self.terrain = build_terrain(TerrainSpec.from_dict(config.terrain), config.seed)
        self.rig = SensorRig(self.terrain, config, self.rng)
        self.K = self.rig.K
        self.dt = 1.0 / config.camera_rate
        self.frame = 0
        x, y = config.start
        self.pos = np.array([x, y, self.ground(x, y) + config.altitude])
        self.state = LandingState.SELECT_SITE
        self.tracker = CandidateTracker(last_confirm_time=0.0)
        self.planner = WanderPlanner(config.terrain.get("extent", 40.0), config.wander_cell, config.seed, config.start)
        self.target = None
        self.records = []
        self.trajectory = []
        self.states = [self.state.value]
        self.accum = []
        self.weights = LossWeights(**config.weights)
        self.opts = RefineOptions(max_iters=config.refine_iters)
        self._log_pose()

    # -- helpers -----------------------------------------------------------

    @property
    def now(self):
        return self.frame * self.dt

    def ground(self, x, y):
        return float(self.terrain.height_at(np.array([x]), np.array([y]))[0])

    def body(self):
        return self.rig.body_pose(self.pos, self.cfg.yaw)

    def budget_left(self):
        return self.frame < self.cfg.frame_budget

    def _log_pose(self):
        self.trajectory.append([round(self.now, 6), *map(float, self.pos), self.state.value])

    def advance(self, seconds):
        """Hover in place for ``seconds`` (at least one camera frame)."""
        for _ in range(max(1, int(math.ceil(seconds / self.dt - 1e-9)))):
            self.frame += 1
            self._log_pose()

    def fire(self, event):
        new, command = step_state_machine(self.state, event)
        if new != self.state:
            self.states.append(new.value)
        self.state = new
        return command

    def fly_to(self, x, y, z=None, speed=None, follow=True):
        """Straight-line move at constant speed, integrated per camera frame.

        With ``follow`` the altitude above ground is held; otherwise the
        path ends at absolute height ``z``.
        """
        start = self.pos.copy()
        if follow:
            alt = start[2] - self.ground(start[0], start[1])
        goal = np.array([x, y, start[2] if z is None else z])
        dist = float(np.linalg.norm((goal - start)[: 2 if follow else 3]))
        speed = speed or self.cfg.horizontal_speed
        n = max(1, int(math.ceil(dist / speed / self.dt)))
        for k in range(1, n + 1):
            if not self.budget_left():
                return False
            p = start + (goal - start) * k / n
            if follow:
                p[2] = self.ground(p[0], p[1]) + alt
            self.pos = p
            self.frame += 1
            self._log_pose()
        return True

    # -- perception --------------------------------------------------------

    def context(self, altitude_prior):
        return PredictionContext(self.K, self.rig.fov, altitude_prior, [], self.weights, self.opts)

    def perceive(self):
        """One dynamic-completion cycle at the current hover pose."""
        cfg = self.cfg
        t0 = self.now
        body = self.body()
        horizon = max(cfg.deadline, 0.0) + 1.0
        imu = _hover_track(body, t0, horizon)
        left, li, ri = self.rig.stereo(body, t0)
        ctx = self.context(self.pos[2] - self.ground(self.pos[0], self.pos[1]))
        ctx.neighbors = [(ri, self.rig.T_rl)]
        frame = StereoFrame(li, ri, self.rig.T_rl, ctx, t0)

        def stream():
            yield frame
            yield from self.rig.packets(imu, t0, horizon)

        res = dynamic_completion(stream(), AccumulationBuffer(t0), deadline=cfg.deadline,
                                 supersample=cfg.supersample)
        self.accum.append(res.accumulation_time)
        self.advance(max(res.accumulation_time, cfg.perception_period, self.dt))
        return left, res

    def site_from_depth(self, depth: DepthMap, camera_pose: Transform, smoothing=None):
        if smoothing is None:
            smoothing = self.cfg.mask_smoothing
        level = correct_attitude(to_plane_depth(depth, self.K), 0.0, 0.0, self.K)
        mask = safety_mask(level, self.K, self.cfg.t_inc, self.cfg.t_tur, self.cfg.morph_radius, smoothing)
        circle = largest_inscribed_circle(mask.refined)
        cand = None
        if circle is not None:
            cand = make_candidate(circle[0], circle[1], level, self.K, camera_pose, self.cfg.min_radius_m)
        return level, mask, cand

    def record(self, left, res, mask, cand, decision, command, kind="select"):
        rec = {
            "t": round(self.now, 6),
            "kind": kind,
            "state": self.state.value,
            "command": command,
            "decision": decision,
            "position": [float(v) for v in self.pos],
            "accumulation_time": res.accumulation_time if res is not None else None,
            "accepted": bool(res.accepted) if res is not None else None,
            "predictions": len(res.evaluations) if res is not None else 0,
            "streak": self.tracker.consecutive_confirms,
            "candidate": cand.to_dict() if cand is not None else None,
            "mask": mask.stats(),
        }
        if res is not None:
            sp = res.sparse
            rec["density"] = float(sp.valid[self.rig.fov].mean()) if sp is not None else 0.0
            gt = DepthMap(np.where(self.rig.fov, left.true_depth.grid, np.nan), "plane")
            try:
                m = compute_metrics(res.depth, gt)
                rec.update(rmse=m.rmse, rel=m.rel, delta=m.delta, count=m.count)
            except EmptyInputError:
                pass
            if res.evaluations:
                rec["ssim"] = res.evaluations[-1][1].sim_pred
        self.records.append(rec)

    # -- states ------------------------------------------------------------

    def select_step(self):
        cfg = self.cfg
        left, res = self.perceive()
        self.fire(Event.DEPTH_READY)
        # an unaccepted result is a raw LiDAR fill; filter it like the confirm map
        smoothing = cfg.mask_smoothing if res.accepted else cfg.confirm_smoothing
        level, mask, cand = self.site_from_depth(res.depth, left.pose, smoothing)
        if self.observer is not None:
            self.observer("select", left.image, level, mask, cand)
        decision = update_tracker(self.tracker, cand, self.now)
        command = self.fire(Event(decision.value))
        self.record(left, res, mask, cand, decision.value, command)
        if self.state == LandingState.DESCEND:
            self.target = self.tracker.last_candidate.world_position.copy()
        elif command == "next-waypoint":
            wp = self.planner.next_waypoint()
            if wp is None:
                self.fire(Event.PATH_EXHAUSTED)
                return
            self.planner.mark_visited(self.planner.cell_of(*wp))
            self.fly_to(wp[0], wp[1])
            self.tracker = CandidateTracker(last_confirm_time=self.now)
            self.planner.mark_visited(self.planner.cell_of(self.pos[0], self.pos[1]))

    def descend_step(self):
        x, y, z = self.target
        if not self.fly_to(x, y):
            return
        if not self.fly_to(x, y, z + self.cfg.confirm_altitude, self.cfg.descent_speed, follow=False):
            return
        self.fire(Event.ALTITUDE_BELOW_THRESHOLD)

    def confirm_step(self):
        """Hover and re-check the site from dense LiDAR only."""
        cfg = self.cfg
        t0 = self.now
        body = self.body()
        imu = _hover_track(body, t0, cfg.confirm_window)
        buf = AccumulationBuffer(t0)
        for pkt in self.rig.packets(imu, t0, cfg.confirm_window):
            buf.extend(pkt.times, pkt.points_cam)
        self.advance(cfg.confirm_window)
        times, pts = buf.snapshot()
        sparse = rasterize_sparse(pts, self.K, times, t0)
        cam = self.rig.camera_pose(body)
        passed = False
        mask = None
        cand = None
        if not sparse.is_empty():
            dense = nn_interpolate(sparse, self.rig.fov)
            level, mask, cand = self.site_from_depth(dense, cam, cfg.confirm_smoothing)
            if self.observer is not None:
                self.observer("confirm", None, level, mask, cand)
            q = cam.inverse().apply(self.target)
            if q[2] > 0:
                c = int(np.floor(self.K.focal * q[0] / q[2] + self.K.cx + 0.5))
                r = int(np.floor(self.K.focal * q[1] / q[2] + self.K.cy + 0.5))
                H, W = self.K.shape
                if 0 <= r < H and 0 <= c < W and np.isfinite(level.grid[r, c]):
                    R = level.grid[r, c] / self.K.focal * clearance(mask.refined)[r, c]
                    passed = R > cfg.min_radius_m
            if cand is not None and np.linalg.norm(cand.world_position - self.target) <= self.tracker.association_radius:
                self.target = cand.world_position.copy()
                passed = True
        if mask is None:
            empty = np.zeros(self.K.shape, dtype=bool)
            mask = SafetyMask(empty, empty, cfg.t_inc, cfg.t_tur)
        command = self.fire(Event.CONFIRM_PASS if passed else Event.CONFIRM_FAIL)
        self.record(None, None, mask, cand, "confirm-pass" if passed else "confirm-fail", command, kind="confirm")
        if not passed:
            # climb back to the search altitude and start over
            x, y = self.pos[0], self.pos[1]
            self.fly_to(x, y, self.ground(x, y) + cfg.altitude, cfg.descent_speed, follow=False)
            self.tracker = CandidateTracker(last_confirm_time=self.now)
            self.target = None

    def final_step(self):
        x, y, z = self.target
        if not self.fly_to(x, y, follow=True):
            return
        if not self.fly_to(x, y, self.ground(x, y), self.cfg.descent_speed, follow=False):
            return
        self.fire(Event.TOUCHDOWN)

    def run(self) -> EpisodeReport:
        handlers = {
            LandingState.SELECT_SITE: self.select_step,
            LandingState.WANDER: self.select_step,
            LandingState.DESCEND: self.descend_step,
            LandingState.CONFIRM_SITE: self.confirm_step,
            LandingState.FINAL_DESCEND: self.final_step,
        }
        while self.state not in (LandingState.LANDED, LandingState.ABORT) and self.budget_left():
            handlers[self.state]()
        cfg = self.cfg
        touchdown = None
        dist = None
        if self.state == LandingState.LANDED:
            touchdown = [float(v) for v in self.pos]
            radius = cfg.oracle_radius if cfg.oracle_radius is not None else cfg.min_radius_m
            oracle = SafetyOracle(self.terrain, cfg.t_inc, cfg.t_tur, radius)
            safe = oracle(touchdown[0], touchdown[1])
            outcome = "landed-safe" if safe else "landed-unsafe"
            dist = 0.0 if safe else oracle.distance_to_safe(touchdown[0], touchdown[1])
        elif self.state == LandingState.ABORT:
            outcome = "aborted"
        else:
            outcome = "timeout"
        acc = np.array(self.accum) if self.accum else np.zeros(1)
        return EpisodeReport(
            outcome=outcome,
            touchdown=touchdown,
            distance_to_safe=dist,
            mean_accumulation_time=float(acc.mean()),
            max_accumulation_time=float(acc.max()),
            frames=self.records,
            trajectory=self.trajectory,
            frames_used=self.frame,
            states=self.states,
            seed=cfg.seed,
            config_hash=io.config_hash(cfg.to_dict()),
        )


def run_episode(config: EpisodeConfig, observer=None) -> EpisodeReport:
    """Simulate sensors, perception and decisions until touchdown, abort or
    the frame budget runs out.  Deterministic for a given config and seed.

    ``observer(kind, image, level_depth, mask, candidate)`` is called after
    every site evaluation (kind "select" or "confirm"; image None for the
    LiDAR-only confirm pass).
    """
    return _Episode(config, observer).run()


# ---------------------------------------------------------------------------
# scenario terrains

SCENARIOS = ("safe-disc", "safe-disc-unknown", "all-unsafe")


def scenario_terrain(kind: str, seed: int = 0) -> dict:
    """Terrain spec dicts for the standard episode scenarios.

    * ``safe-disc``: a 20° rough slope, unsafe everywhere except one flat
      disc of radius 3 m within 2 m of the origin; noise albedo (familiar).
    * ``safe-disc-unknown``: same geometry without roughness and with a
      uniform albedo, so only shading carries image structure.
    * ``all-unsafe``: a 45° slope everywhere.
    """
    rng = np.random.default_rng(1000 + seed)
    if kind == "all-unsafe":
        return {
            "extent": 40.0,
            "features": [
                {"type": "plane", "height": 0.0, "slope": 45.0, "azimuth": float(rng.uniform(0, 360))},
                {"type": "roughness", "amplitude": 0.1, "wavelength": 2.0, "octaves": 3, "seed": seed},
            ],
            "texture": "noise",
            "texture_wavelength": 1.0,
            "texture_seed": seed,
        }
    if kind not in SCENARIOS:
        raise ConfigError(f"unknown scenario {kind!r}")
    ang = rng.uniform(0, 2 * np.pi)
    r = rng.uniform(0, 2)
    center = [float(r * np.cos(ang)), float(r * np.sin(ang))]
    unknown = kind == "safe-disc-unknown"
    return {
        "extent": 40.0,
        "features": [
            {"type": "plane", "height": 0.0, "slope": 20.0, "azimuth": float(rng.uniform(0, 360))},
            {"type": "roughness", "amplitude": 0.0 if unknown else 0.3, "wavelength": 2.0, "octaves": 3, "seed": seed},
            {"type": "flat_patch", "center": center, "radius": 3.0},
        ],
        "texture": "flat" if unknown else "noise",
        "texture_wavelength": 1.0,
        "texture_seed": seed,
    }


# ---------------------------------------------------------------------------
# flight logs and dataset export


@dataclass
class ExportSummary:
    exported: int
    skipped: int
    frames: list


def write_synthetic_log(log_dir, terrain_spec: TerrainSpec, n_frames: int = 100, seed: int = 0,
                        altitude: float = 10.0, velocity=(1.0, 0.5, -0.2), yaw_rate: float = 5.0,
                        camera: CameraIntrinsics | None = None, pattern: ScanPattern | None = None,
                        lidar_noise: float = 0.0, camera_rate: float = 20.0, lidar_offset=(0.0, 0.05, 0.0),
                        tail: float = 1.0):
    """Fly a straight, slowly yawing line and store poses, LiDAR, images and calibration.

    Returns the terrain so callers can render ground truth.
    """
    log_dir = Path(log_dir)
    (log_dir / "images").mkdir(parents=True, exist_ok=True)
    K = camera or CameraIntrinsics.centered(64, 64, 96.0)
    pattern = pattern or ScanPattern(points_per_second=20_000.0)
    terrain = build_terrain(terrain_spec, seed)
    T_cl = Transform.translate(*lidar_offset)
    T_li = T_IMU_CAM.compose(T_cl).inverse()
    T_il = T_li.inverse()
    duration = n_frames / camera_rate + tail
    ts = np.arange(0.0, duration + 1e-9, 0.05)
    h0 = float(terrain.height_at(np.array([0.0]), np.array([0.0]))[0])
    v = np.asarray(velocity, dtype=float)
    poses = [TimedPose(float(t), Transform.from_euler(yaw=yaw_rate * t, t=np.array([0.0, 0.0, h0 + altitude]) + v * t))
             for t in ts]
    imu = PoseTrack(poses)
    write_pose_csv(log_dir / "poses.csv", imu)
    lidar_track = PoseTrack([TimedPose(p.timestamp, p.pose.compose(T_il)) for p in poses])
    cloud = sample_cloud(terrain, lidar_track, pattern, 0.0, float(ts[-1]), lidar_noise, 100.0, seed)
    write_cloud_csv(log_dir / "lidar.csv", cloud)
    rows = []
    for i in range(n_frames):
        t = i / camera_rate
        fr = render_frame(terrain, imu.at(t).compose(T_IMU_CAM), K, t)
        name = f"images/{i:05d}.pgm"
        io.write_pgm(log_dir / name, fr.image)
        rows.append({"t": repr(t), "image": name})
    io.write_csv(log_dir / "frames.csv", rows, ["t", "image"])
    io.write_json(log_dir / "calib.json", {
        "camera": K.to_dict(),
        "T_li": T_li.as_matrix(),
        "T_cl": T_cl.as_matrix(),
        "T_imu_cam": T_IMU_CAM.as_matrix(),
        "terrain": terrain_spec.to_dict(),
        "seed": seed,
    })
    return terrain


@dataclass
class FlightLog:
    imu: PoseTrack
    cloud: PointCloud
    frames: list  # [(t, image path)]
    K: CameraIntrinsics
    T_li: Transform
    T_cl: Transform


def _transform(m, path):
    try:
        return Transform.from_matrix(np.asarray(m, dtype=float)[:3, :3], np.asarray(m, dtype=float)[:3, 3])
    except (ValueError, IndexError, TypeError) as exc:
        raise IngestionError(f"bad transform: {exc}", path) from exc


def read_flight_log(log_dir) -> FlightLog:
    log_dir = Path(log_dir)
    for name in ("poses.csv", "lidar.csv", "frames.csv", "calib.json"):
        if not (log_dir / name).exists():
            raise IngestionError("missing flight-log file", log_dir / name)
    calib = io.read_json(log_dir / "calib.json")
    try:
        K = CameraIntrinsics.from_dict(calib["camera"])
    except (KeyError, TypeError, ValueError) as exc:
        raise IngestionError(f"bad camera entry: {exc}", log_dir / "calib.json") from exc
    T_li = _transform(calib.get("T_li"), log_dir / "calib.json")
    T_cl = _transform(calib.get("T_cl"), log_dir / "calib.json")
    imu = read_pose_csv(log_dir / "poses.csv")
    cloud = read_cloud_csv(log_dir / "lidar.csv")
    frames = []
    path = log_dir / "frames.csv"
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"t", "image"} <= set(reader.fieldnames):
            raise IngestionError("expected header t,image", path)
        last = -math.inf
        for i, row in enumerate(reader, start=2):
            try:
                t = float(row["t"])
            except (TypeError, ValueError) as exc:
                raise IngestionError(f"row {i}: {exc}", path) from exc
            if t < last:
                raise SchemaError("frame timestamps must be non-decreasing", path=path, row=i)
            last = t
            frames.append((t, log_dir / row["image"]))
    return FlightLog(imu, cloud, frames, K, T_li, T_cl)


def sparse_maps(flight: FlightLog, window: float):
    """Yield ``(index, t, SparseDepth | None)`` per camera frame.

    Each map accumulates the LiDAR returns in [t, t + window) aligned into the
    camera at t; depth and time offsets are rounded to float32 so they equal
    what the float-grid files hold.
    """
    if not window > 0:
        raise ValueError("window must be positive")
    cloud = flight.cloud
    lo, hi = flight.imu.start, flight.imu.end
    for i, (t, _) in enumerate(flight.frames):
        if not lo <= t <= hi:
            yield i, t, None
            continue
        part = cloud.window(t, t + window)
        part = part.select((part.times >= lo) & (part.times <= hi))
        times, pts = align_points(part, flight.imu, flight.T_li, flight.T_cl, t)
        sp = rasterize_sparse(pts, flight.K, times, t)
        if sp.is_empty():
            yield i, t, None
            continue
        offset = io.as_float32(sp.source_time - t)
        yield i, t, SparseDepth(io.as_float32(sp.grid), offset + t, t)


def export_depth_dataset(log_dir, out_dir, window: float = 1.0) -> ExportSummary:
    """Write one sparse depth grid (+ time-offset grid and sidecar) per frame."""
    flight = read_flight_log(log_dir)
    out = Path(out_dir)
    (out / "sparse").mkdir(parents=True, exist_ok=True)
    rows = []
    exported = skipped = 0
    for i, t, sp in sparse_maps(flight, window):
        img = flight.frames[i][1]
        if sp is None:
            skipped += 1
            rows.append({"index": i, "t": repr(t), "image": str(img), "sparse": "", "count": 0})
            continue
        stem = out / "sparse" / f"{i:05d}"
        io.write_pfm(stem.with_name(stem.name + "_dt.pfm"), sp.source_time - t)
        io.write_grid(stem.with_suffix(".pfm"), sp.grid, {
            "index": i,
            "timestamp": t,
            "image": str(img),
            "window": window,
            "count": sp.count,
            "density": sp.density,
            "kind": "plane",
            "time_offsets": stem.name + "_dt.pfm",
            "camera": flight.K.to_dict(),
        })
        exported += 1
        rows.append({"index": i, "t": repr(t), "image": str(img), "sparse": f"sparse/{i:05d}.pfm", "count": sp.count})
    io.write_csv(out / "index.csv", rows, ["index", "t", "image", "sparse", "count"])
    return ExportSummary(exported, skipped, rows)


def load_sparse(path) -> SparseDepth:
    path = Path(path)
    grid, meta = io.read_grid(path)
    dt = io.read_pfm(path.with_name(meta["time_offsets"]))
    t = float(meta["timestamp"])
    return SparseDepth(grid, dt + t, t)


# ---------------------------------------------------------------------------
# density sweep


def sweep_scene(seed: int) -> dict:
    """Random benchmark scene: tilted rough ground with a few boxes."""
    rng = np.random.default_rng(seed)
    feats = [
        {"type": "plane", "height": 0.0, "slope": float(rng.uniform(0, 8)), "azimuth": float(rng.uniform(0, 360))},
        {"type": "roughness", "amplitude": 0.3, "wavelength": 3.0, "octaves": 3, "seed": seed},
    ]
    for _ in range(3):
        feats.append({"type": "box", "center": rng.uniform(-3, 3, 2).tolist(), "size": rng.uniform(1, 3, 2).tolist(),
                      "height": float(rng.uniform(0.5, 2.5))})
    return {"extent": 40.0, "features": feats, "texture_wavelength": 1.0, "texture_octaves": 4, "texture_seed": seed,
            "altitude": float(rng.uniform(8, 12))}


def density_sweep(n_frames: int = 20, seed: int = 0, densities=DENSITY_BUCKETS, lidar_time: float = 1.0,
                  lidar_noise: float = 0.02, refine_iters: int = 100, supersample: int = 4,
                  camera: CameraIntrinsics | None = None, baseline: float = 0.08) -> list[dict]:
    """Per-frame metrics of ``predict`` at several input densities.

    Each rendered frame gets ``lidar_time`` seconds of LiDAR; a density d
    keeps each rasterized sparse pixel with probability d (0 = image only).
    """
    K = camera or CameraIntrinsics.centered(64, 64, 96.0)
    pattern = ScanPattern()
    T_rl = Transform.translate(-baseline, 0.0, 0.0)
    fov = fov_mask_from_cone(K, pattern.fov_half_angle)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_frames):
        sc = sweep_scene(seed * 1000 + i)
        alt = sc.pop("altitude")
        terrain = build_terrain(TerrainSpec.from_dict(sc), seed * 1000 + i)
        L = Transform.translate(0.0, 0.0, alt).compose(T_IMU_CAM)
        left = render_frame(terrain, L, K)
        right = render_frame(terrain, L.compose(T_rl.inverse()), K)
        track = PoseTrack([TimedPose(-1.0, L), TimedPose(lidar_time + 1.0, L)])
        cloud = sample_cloud(terrain, track, pattern, 0.0, lidar_time, lidar_noise, 100.0, seed=seed * 1000 + i)
        full = rasterize_sparse(cloud.points, K, cloud.times, 0.0)
        gt = DepthMap(np.where(fov, left.true_depth.grid, np.nan), "plane")
        for d in densities:
            ctx = PredictionContext(K, fov, alt, [(right.image, T_rl)], LossWeights(), RefineOptions(max_iters=refine_iters))
            if d > 0:
                keep = full.valid & (rng.random(full.shape) < d)
                sp = SparseDepth(np.where(keep, full.grid, np.nan), np.where(keep, full.source_time, np.nan), 0.0)
            else:
                sp = None
            pred = predict(left.image, sp, ctx)
            m = compute_metrics(pred, gt)
            ev = evaluate_prediction(left.image, right.image, pred, sp, T_rl, K, fov, supersample=supersample)
            records.append({
                "frame": i,
                "density": float(d),
                "sparse_fraction": float(sp.valid[fov].mean()) if sp is not None else 0.0,
                "rmse": m.rmse,
                "rel": m.rel,
                "delta": m.delta,
                "ssim": ev.sim_pred,
                "accepted": ev.accepted,
            })
    return records


# ---------------------------------------------------------------------------
# aggregation

METRIC_KEYS = ("rmse", "rel", "delta", "ssim")


def density_bucket(d: float) -> float:
    b = np.asarray(DENSITY_BUCKETS)
    return float(b[int(np.argmin(np.abs(b - d)))])


def aggregate_metrics(records) -> list[dict]:
    """Mean metrics per density bucket, in bucket order.

    ``records`` are dicts with a ``density`` entry plus any of rmse, rel,
    delta, ssim, or EpisodeReports whose per-frame records are pooled.
    """
    flat = []
    for r in records:
        if isinstance(r, EpisodeReport):
            flat.extend(f for f in r.frames if "density" in f)
        else:
            flat.append(r)
    if not flat:
        raise EmptyInputError("no records to aggregate")
    groups: dict[float, list] = {}
    for r in flat:
        groups.setdefault(density_bucket(float(r.get("density", 0.0))), []).append(r)
    table = []
    for b in DENSITY_BUCKETS:
        if b not in groups:
            continue
        rows = groups[b]
        entry = {"density": b, "count": len(rows)}
        for k in METRIC_KEYS:
            vals = [float(r[k]) for r in rows if r.get(k) is not None]
            entry[k] = math.fsum(vals) / len(vals) if vals else None
        table.append(entry)
    return table


def write_summary(table: list[dict], out_dir, stem="summary"):
    out = Path(out_dir)
    io.write_csv(out / f"{stem}.csv", table, ["density", "count", *METRIC_KEYS])
    io.write_json(out / f"{stem}.json", table)
