import json
import shutil

import numpy as np
import pytest

from safeland import io
from safeland.errors import ConfigError, EmptyInputError, IngestionError, SchemaError
from safeland.harness import (
    DENSITY_BUCKETS,
    EpisodeConfig,
    EpisodeReport,
    aggregate_metrics,
    density_bucket,
    density_sweep,
    export_depth_dataset,
    load_sparse,
    read_flight_log,
    run_episode,
    scenario_terrain,
    sparse_maps,
    write_summary,
    write_synthetic_log,
)
from safeland.terrain import SafetyOracle, TerrainSpec, build_terrain, render_frame


# -- configuration -------------------------------------------------------------


def test_config_round_trip():
    cfg = EpisodeConfig(terrain=scenario_terrain("safe-disc", 3), seed=3)
    again = EpisodeConfig.from_dict(json.loads(io.dumps(cfg.to_dict())))
    assert again.to_dict() == cfg.to_dict()
    assert io.config_hash(again.to_dict()) == io.config_hash(cfg.to_dict())


@pytest.mark.parametrize("bad", [
    {"confirm_altitude": 20.0},
    {"camera_rate": 0.0},
    {"baseline": -0.1},
    {"frame_budget": 0},
    {"deadline": -1.0},
])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        EpisodeConfig(**bad)


def test_config_unknown_key_and_scenario_reference(tmp_path):
    with pytest.raises(ConfigError):
        EpisodeConfig.from_dict({"altitud": 10})
    cfg = EpisodeConfig.from_dict({"terrain": {"scenario": "all-unsafe"}, "seed": 4})
    assert cfg.terrain == scenario_terrain("all-unsafe", 4)
    spec = TerrainSpec.from_dict(scenario_terrain("safe-disc", 1))
    (tmp_path / "t.json").write_text(io.dumps(spec.to_dict()))
    (tmp_path / "c.json").write_text(json.dumps({"terrain": "t.json", "seed": 1}))
    assert EpisodeConfig.load(tmp_path / "c.json").terrain == spec.to_dict()


def test_camera_with_explicit_principal_point():
    cfg = EpisodeConfig(camera={"width": 80, "height": 60, "focal": 90.0, "cx": 40.0, "cy": 30.0})
    K = cfg.intrinsics()
    assert (K.width, K.height, K.cx) == (80, 60, 40.0)


# -- scenarios -------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_safe_disc_scenario_has_one_safe_site(seed):
    spec = scenario_terrain("safe-disc", seed)
    t = build_terrain(TerrainSpec.from_dict(spec), seed)
    oracle = SafetyOracle(t, 10.0, 10.0, 2.0)
    cx, cy = next(f for f in spec["features"] if f["type"] == "flat_patch")["center"]
    assert np.hypot(cx, cy) <= 2.0
    assert oracle(cx, cy)
    for ang in np.linspace(0, 2 * np.pi, 8, endpoint=False):
        assert not oracle(cx + 6 * np.cos(ang), cy + 6 * np.sin(ang))


def test_all_unsafe_scenario():
    t = build_terrain(TerrainSpec.from_dict(scenario_terrain("all-unsafe", 0)), 0)
    oracle = SafetyOracle(t, 10.0, 10.0, 2.0)
    assert not any(oracle(x, y) for x in range(-15, 16, 5) for y in range(-15, 16, 5))


def test_unknown_family_differs_only_in_appearance():
    a, b = scenario_terrain("safe-disc", 2), scenario_terrain("safe-disc-unknown", 2)
    assert a["features"][0] == b["features"][0] and a["features"][2] == b["features"][2]
    assert b["texture"] == "flat" and b["features"][1]["amplitude"] == 0.0
    with pytest.raises(ConfigError):
        scenario_terrain("volcano")


# -- flight logs and export ----------------------------------------------------------


@pytest.fixture(scope="module")
def flight_log(tmp_path_factory):
    d = tmp_path_factory.mktemp("log")
    spec = TerrainSpec.from_dict(scenario_terrain("safe-disc", 0))
    terrain = write_synthetic_log(d, spec, n_frames=8, seed=0)
    return d, terrain


def test_log_reads_back(flight_log):
    d, _ = flight_log
    fl = read_flight_log(d)
    assert len(fl.frames) == 8 and fl.frames[3][0] == pytest.approx(0.15)
    assert len(fl.cloud) > 1000
    assert fl.imu.spans(0.0, 0.35 + 1.0)


def test_export_round_trip_exact(flight_log, tmp_path):
    d, _ = flight_log
    summary = export_depth_dataset(d, tmp_path / "a", window=0.5)
    assert summary.exported == 8 and summary.skipped == 0
    fl = read_flight_log(d)
    for i, t, sp in sparse_maps(fl, 0.5):
        back = load_sparse(tmp_path / "a" / "sparse" / f"{i:05d}.pfm")
        assert np.array_equal(back.grid, sp.grid, equal_nan=True)
        assert np.array_equal(back.source_time, sp.source_time, equal_nan=True)
        assert back.reference_time == t


def test_export_is_deterministic(flight_log, tmp_path):
    d, _ = flight_log
    export_depth_dataset(d, tmp_path / "a", window=0.5)
    export_depth_dataset(d, tmp_path / "b", window=0.5)
    for f in sorted((tmp_path / "a" / "sparse").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / "sparse" / f.name).read_bytes()


def test_exported_depth_matches_rendered_truth(flight_log, tmp_path):
    # noiseless LiDAR: each sparse pixel holds a true surface point near that pixel
    d, terrain = flight_log
    fl = read_flight_log(d)
    from safeland.harness import T_IMU_CAM

    _, t, sp = next(iter(sparse_maps(fl, 0.5)))
    truth = render_frame(terrain, fl.imu.at(t).compose(T_IMU_CAM), fl.K).true_depth.grid
    err = np.abs(sp.grid - truth)[sp.valid]
    assert np.median(err) < 0.05


def test_log_errors(flight_log, tmp_path):
    d, _ = flight_log
    bad = tmp_path / "bad"
    shutil.copytree(d, bad)
    (bad / "calib.json").unlink()
    with pytest.raises(IngestionError):
        read_flight_log(bad)
    bad2 = tmp_path / "bad2"
    shutil.copytree(d, bad2)
    lines = (bad2 / "frames.csv").read_text().splitlines()
    lines[3], lines[4] = lines[4], lines[3]
    (bad2 / "frames.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(SchemaError) as e:
        read_flight_log(bad2)
    # header is line 1, so 0-based line 4 is file row 5
    assert e.value.row == 5
    with pytest.raises(ValueError):
        next(iter(sparse_maps(read_flight_log(d), 0.0)))


# -- aggregation ---------------------------------------------------------------------


def test_density_bucket():
    assert [density_bucket(x) for x in (0.0, 0.04, 0.06, 0.22, 0.45, 0.8, 0.74)] == [0.0, 0.0, 0.1, 0.3, 0.5, 1.0, 0.5]


def test_aggregate_matches_manual_means(rng, tmp_path):
    recs = [{"density": float(rng.choice(DENSITY_BUCKETS)), "rmse": float(rng.uniform(0, 900)),
             "rel": float(rng.random()), "delta": float(rng.random()), "ssim": float(rng.random())}
            for _ in range(60)]
    table = aggregate_metrics(recs)
    assert [r["density"] for r in table] == sorted({r["density"] for r in recs})
    for row in table:
        group = [r for r in recs if r["density"] == row["density"]]
        assert row["count"] == len(group)
        for k in ("rmse", "rel", "delta", "ssim"):
            assert row[k] == pytest.approx(np.mean([r[k] for r in group]), rel=1e-12)
    write_summary(table, tmp_path)
    assert io.read_json(tmp_path / "summary.json") == json.loads(io.dumps(table))
    with pytest.raises(EmptyInputError):
        aggregate_metrics([])


def test_aggregate_pools_episode_frames():
    frames = [{"density": 0.1, "rmse": 100.0}, {"kind": "confirm"}, {"density": 0.12, "rmse": 300.0, "ssim": None}]
    rep = EpisodeReport("timeout", None, None, 0.1, 0.1, frames, [], 10, [], 0, "")
    (row,) = aggregate_metrics([rep])
    assert row["density"] == 0.1 and row["count"] == 2 and row["rmse"] == 200.0 and row["ssim"] is None


def test_density_sweep_records():
    recs = density_sweep(n_frames=1, seed=2, densities=(0.0, 1.0), refine_iters=5, supersample=1)
    assert [r["density"] for r in recs] == [0.0, 1.0]
    assert recs[0]["sparse_fraction"] == 0.0 and recs[1]["sparse_fraction"] > 0.2
    assert all(r["rmse"] >= 0 and 0 <= r["delta"] <= 1 for r in recs)
    assert recs[1]["rmse"] < recs[0]["rmse"]


# -- episodes ------------------------------------------------------------------------


def test_short_episode_is_deterministic():
    cfg = EpisodeConfig(terrain=scenario_terrain("safe-disc", 3), seed=3, frame_budget=30, refine_iters=5)
    a = run_episode(cfg).to_dict()
    b = run_episode(cfg).to_dict()
    assert io.dumps(a) == io.dumps(b)
    assert a["outcome"] == "timeout" and a["frames_used"] >= 30
    assert a["trajectory"][0][0] == 0.0 and a["states"][0] == "select-site"


def test_observer_sees_each_site_evaluation():
    seen = []
    cfg = EpisodeConfig(terrain=scenario_terrain("safe-disc", 1), seed=1, frame_budget=20, refine_iters=5)
    rep = run_episode(cfg, observer=lambda kind, img, depth, mask, cand: seen.append((kind, mask.raw.shape)))
    assert len(seen) == len(rep.frames) and all(k == "select" and s == (64, 64) for k, s in seen)
    assert all(f["mask"]["t_inc"] == 10.0 for f in rep.frames)


def test_empty_lidar_log_exports_nothing(flight_log, tmp_path):
    d, _ = flight_log
    log = tmp_path / "empty"
    shutil.copytree(d, log)
    (log / "lidar.csv").write_text("t,x,y,z,intensity\n")
    summary = export_depth_dataset(log, tmp_path / "out")
    assert summary.exported == 0 and summary.skipped == 8
    assert not any((tmp_path / "out" / "sparse").iterdir())
