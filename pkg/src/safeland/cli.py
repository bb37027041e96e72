"""Command-line entry point: ``safeland <command> ...``.

Every command writes into its own run directory (``<out>/<command>-<hash>``)
holding a ``manifest.json`` with the config hash, seed and library versions
next to the CSV/JSON tables, PGM/PFM artifacts and PNG figures.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness, io, plotting
from .errors import IngestionError, SafeLandError
from .geometry import CameraIntrinsics, Correspondence, solve_pnp
from .lidar_sim import ScanPattern, coverage

log = logging.getLogger("safeland")


def _run_dir(out, command: str, config: dict) -> Path:
    d = Path(out) / f"{command}-{io.config_hash(config)[:12]}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _times(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad time list {text!r}") from None
    if not vals or any(v <= 0 for v in vals):
        raise argparse.ArgumentTypeError("times must be positive")
    return vals


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args):
    cfg_path = Path(args.config)
    raw = io.read_json(cfg_path)
    if args.seed is not None:
        raw["seed"] = args.seed
    config = harness.EpisodeConfig.from_dict(raw, base_dir=cfg_path.parent)
    cfg = config.to_dict()
    run = _run_dir(args.out, "simulate", cfg)
    io.write_manifest(run, "simulate", cfg, config.seed, {"config_file": str(cfg_path)})

    last = {}

    def keep(kind, image, depth, mask, cand):
        if kind == "select":
            last.update(image=image, depth=depth, mask=mask, cand=cand)

    report = harness.run_episode(config, observer=keep)
    io.write_json(run / "report.json", report.to_dict())
    records = [dict(f, seed=config.seed) for f in report.frames if "density" in f]
    io.write_json(run / "records.json", records)
    flat = [{**{k: v for k, v in f.items() if not isinstance(v, (dict, list))},
             "radius_m": f["candidate"]["radius_m"] if f.get("candidate") else None,
             "refined_safe_fraction": f["mask"]["refined_safe_fraction"]} for f in report.frames]
    cols = ["t", "kind", "state", "command", "decision", "accumulation_time", "accepted", "predictions",
            "density", "rmse", "rel", "delta", "ssim", "streak", "radius_m", "refined_safe_fraction"]
    io.write_csv(run / "frames.csv", flat, cols)
    io.write_csv(run / "trajectory.csv", [dict(zip(["t", "x", "y", "z", "state"], r)) for r in report.trajectory])
    plotting.trajectory_figure(report.trajectory, run / "trajectory.png", report.touchdown,
                               f"{report.outcome} (seed {config.seed})")
    if last:
        io.write_pgm(run / "site_image.pgm", last["image"])
        io.write_pgm(run / "site_mask_raw.pgm", last["mask"].raw, maxval=255)
        io.write_pgm(run / "site_mask.pgm", last["mask"].refined, maxval=255)
        io.write_grid(run / "site_depth.pfm", last["depth"].grid,
                      {"kind": "plane", "camera": config.intrinsics().to_dict(), "units": "m"})
        plotting.site_figure(last["image"], last["depth"].grid, last["mask"], last["cand"], run / "site.png")
    summary = {
        "outcome": report.outcome,
        "touchdown": report.touchdown,
        "distance_to_safe": report.distance_to_safe,
        "mean_accumulation_time": report.mean_accumulation_time,
        "max_accumulation_time": report.max_accumulation_time,
        "frames_used": report.frames_used,
        "states": report.states,
    }
    io.write_json(run / "summary.json", summary)
    print(json.dumps(summary))
    print(run)
    return 0


def cmd_sweep(args):
    cfg = {"frames": args.frames, "seed": args.seed, "densities": list(harness.DENSITY_BUCKETS),
           "refine_iters": args.iters}
    run = _run_dir(args.out, "sweep", cfg)
    io.write_manifest(run, "sweep", cfg, args.seed)
    records = harness.density_sweep(args.frames, args.seed, refine_iters=args.iters)
    io.write_json(run / "records.json", records)
    io.write_csv(run / "records.csv", records)
    table = harness.aggregate_metrics(records)
    harness.write_summary(table, run)
    plotting.density_figure(table, run / "density.png")
    _print_table(table)
    print(run)
    return 0


def cmd_synth_log(args):
    cfg = {"frames": args.frames, "seed": args.seed, "scenario": args.scenario}
    spec = harness.TerrainSpec.from_dict(harness.scenario_terrain(args.scenario, args.seed))
    harness.write_synthetic_log(args.out, spec, args.frames, args.seed)
    io.write_manifest(args.out, "synth-log", cfg, args.seed)
    print(args.out)
    return 0


def cmd_export(args):
    cfg = {"log": str(Path(args.log).resolve()), "window": args.window}
    run = _run_dir(args.out, "export", cfg)
    summary = harness.export_depth_dataset(args.log, run, args.window)
    io.write_manifest(run, "export-dataset", cfg, None,
                      {"exported": summary.exported, "skipped": summary.skipped})
    print(json.dumps({"exported": summary.exported, "skipped": summary.skipped}))
    print(run)
    return 0


def _collect_records(root: Path) -> list[dict]:
    records = []
    for p in sorted(root.rglob("records.json")):
        data = io.read_json(p)
        if not isinstance(data, list):
            raise IngestionError("records file must hold a JSON list", p)
        records.extend(data)
    for p in sorted(root.rglob("records.csv")):
        if (p.parent / "records.json").exists():
            continue
        with open(p, newline="") as fh:
            for row in csv.DictReader(fh):
                rec = {}
                for k, v in row.items():
                    try:
                        rec[k] = float(v) if v != "" else None
                    except ValueError:
                        rec[k] = v
                records.append(rec)
    return records


def cmd_evaluate(args):
    root = Path(args.records)
    if not root.is_dir():
        raise IngestionError("records directory not found", root)
    records = _collect_records(root)
    cfg = {"records": str(root.resolve()), "n": len(records)}
    run = _run_dir(args.out or root, "evaluate", cfg)
    table = harness.aggregate_metrics(records)
    harness.write_summary(table, run)
    plotting.density_figure(table, run / "density.png")
    io.write_manifest(run, "evaluate", cfg)
    _print_table(table)
    print(run)
    return 0


def cmd_coverage(args):
    pattern = ScanPattern.load(args.pattern) if args.pattern else ScanPattern()
    cfg = {"pattern": pattern.to_dict(), "times": args.times, "grid": args.grid}
    run = _run_dir(args.out, "coverage", cfg)
    rows = [{"integration_time": t, "covered_fraction": coverage(pattern, t, args.grid).covered_fraction}
            for t in args.times]
    io.write_csv(run / "coverage.csv", rows)
    io.write_json(run / "coverage.json", rows)
    curve_t = np.linspace(0.02, max(args.times), 40)
    curve = (curve_t, [coverage(pattern, t, args.grid).covered_fraction for t in curve_t])
    plotting.coverage_figure(args.times, [r["covered_fraction"] for r in rows], run / "coverage.png", curve)
    io.write_manifest(run, "coverage", cfg)
    for r in rows:
        print(f"{r['integration_time']:g}\t{r['covered_fraction']:.4f}")
    print(run)
    return 0


def read_correspondences(path) -> list[Correspondence]:
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise IngestionError(str(exc), path) from exc
    with fh:
        reader = csv.DictReader(fh)
        need = {"X", "Y", "Z", "u", "v"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise IngestionError("expected header X,Y,Z,u,v", path)
        out = []
        for i, row in enumerate(reader, start=2):
            try:
                out.append(Correspondence((float(row["X"]), float(row["Y"]), float(row["Z"])),
                                          (float(row["u"]), float(row["v"]))))
            except (TypeError, ValueError) as exc:
                raise IngestionError(f"row {i}: {exc}", path) from exc
    return out


def cmd_calibrate(args):
    corr = read_correspondences(args.correspondences)
    if args.intrinsics:
        K = CameraIntrinsics.from_dict(io.read_json(args.intrinsics))
    else:
        K = harness.EpisodeConfig().intrinsics()
    cfg = {"correspondences": str(Path(args.correspondences).resolve()), "camera": K.to_dict()}
    run = _run_dir(args.out, "calibrate", cfg)
    res = solve_pnp(corr, K)
    X = np.array([c.world_point for c in corr])
    uv = np.array([c.pixel for c in corr])
    P = res.transform.apply(X)
    proj = np.column_stack([K.focal * P[:, 0] / P[:, 2] + K.cx, K.focal * P[:, 1] / P[:, 2] + K.cy])
    resid = proj - uv
    out = {
        "T_cl": res.transform.as_matrix(),
        "rotation_wxyz": res.transform.rotation,
        "translation": res.transform.translation,
        "euler_deg": res.transform.euler(),
        "reprojection_error_px": res.reprojection_error,
        "iterations": res.iterations,
        "n": len(corr),
    }
    io.write_json(run / "extrinsics.json", out)
    io.write_csv(run / "residuals.csv", [{"u": a, "v": b, "du": c, "dv": d}
                                         for (a, b), (c, d) in zip(uv.tolist(), resid.tolist())])
    plotting.residual_figure(resid, run / "residuals.png")
    io.write_manifest(run, "calibrate", cfg)
    print(json.dumps({"reprojection_error_px": res.reprojection_error, "iterations": res.iterations}))
    print(run)
    return 0


def _print_table(table):
    print("density\tcount\trmse_mm\trel\tdelta\tssim")
    for r in table:
        ssim = "" if r["ssim"] is None else f"{r['ssim']:.4f}"
        print(f"{r['density']:g}\t{r['count']}\t{r['rmse']:.1f}\t{r['rel']:.2f}\t{r['delta']:.3f}\t{ssim}")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="safeland", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run one closed-loop landing episode")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", default="runs")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("sweep", help="depth-completion metrics over input densities on rendered frames")
    s.add_argument("--frames", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--iters", type=int, default=100)
    s.add_argument("--out", default="runs")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("synth-log", help="write a synthetic flight log (poses, LiDAR, images, calibration)")
    s.add_argument("--out", required=True)
    s.add_argument("--frames", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--scenario", default="safe-disc", choices=harness.SCENARIOS)
    s.set_defaults(func=cmd_synth_log)

    s = sub.add_parser("export-dataset", help="sparse depth maps for every frame of a flight log")
    s.add_argument("--log", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--window", type=float, default=1.0)
    s.set_defaults(func=cmd_export)

    s = sub.add_parser("evaluate", help="aggregate per-frame records by density bucket")
    s.add_argument("--records", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("coverage", help="scan-pattern FOV coverage against integration time")
    s.add_argument("--pattern")
    s.add_argument("--times", type=_times, default=[0.1, 0.5, 1.0, 2.0])
    s.add_argument("--grid", type=int, default=32)
    s.add_argument("--out", default="runs")
    s.set_defaults(func=cmd_coverage)

    s = sub.add_parser("calibrate", help="LiDAR-camera extrinsics from 3D-2D correspondences")
    s.add_argument("--correspondences", required=True)
    s.add_argument("--intrinsics")
    s.add_argument("--out", default="runs")
    s.set_defaults(func=cmd_calibrate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except SafeLandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
