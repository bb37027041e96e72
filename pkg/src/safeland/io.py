"""Artifact formats: PGM images, PFM float grids with JSON sidecars, JSON/CSV helpers."""

from __future__ import annotations

import csv
import hashlib
import json
import platform
import re
import sys
from pathlib import Path

import numpy as np

from .errors import IngestionError


# ---------------------------------------------------------------------------
# PGM (binary, 8- or 16-bit)


def write_pgm(path, image, maxval: int = 65535, vmin: float = 0.0, vmax: float = 1.0):
    """Write a grayscale image.  Float input is scaled from [vmin, vmax];
    boolean input becomes 0 / maxval."""
    a = np.asarray(image)
    if a.ndim != 2:
        raise ValueError("PGM images are 2-D")
    if a.dtype == bool:
        q = a.astype(np.int64) * maxval
    elif np.issubdtype(a.dtype, np.integer):
        q = a.astype(np.int64)
    else:
        f = np.nan_to_num((a - vmin) / (vmax - vmin), nan=0.0)
        q = np.rint(np.clip(f, 0.0, 1.0) * maxval).astype(np.int64)
    if q.min(initial=0) < 0 or q.max(initial=0) > maxval:
        raise ValueError("pixel values outside [0, maxval]")
    dtype = ">u2" if maxval > 255 else "u1"
    H, W = a.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n{maxval}\n".encode("ascii"))
        fh.write(q.astype(dtype).tobytes())


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Return ``(integer image, maxval)``."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise IngestionError(str(exc), path) from exc
    m = re.match(rb"P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s", data)
    if not m:
        raise IngestionError("not a binary PGM file", path)
    W, H, maxval = (int(g) for g in m.groups())
    dtype = ">u2" if maxval > 255 else "u1"
    body = data[m.end():]
    need = W * H * np.dtype(dtype).itemsize
    if len(body) < need:
        raise IngestionError("truncated PGM data", path)
    return np.frombuffer(body[:need], dtype=dtype).reshape(H, W).astype(np.int64), maxval


def read_pgm_float(path) -> np.ndarray:
    img, maxval = read_pgm(path)
    return img / float(maxval)


# ---------------------------------------------------------------------------
# PFM float grid (single channel, little endian, bottom row first)


def write_pfm(path, grid):
    """Single-channel PFM; NaN marks unknown.  Values are stored as float32."""
    a = np.asarray(grid, dtype="<f4")
    if a.ndim != 2:
        raise ValueError("float grids are 2-D")
    H, W = a.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{W} {H}\n-1.0\n".encode("ascii"))
        fh.write(np.flipud(a).tobytes())


def read_pfm(path) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise IngestionError(str(exc), path) from exc
    m = re.match(rb"Pf\s+(\d+)\s+(\d+)\s+([-+0-9.eE]+)\s", data)
    if not m:
        raise IngestionError("not a single-channel PFM file", path)
    W, H = int(m.group(1)), int(m.group(2))
    scale = float(m.group(3))
    dtype = "<f4" if scale < 0 else ">f4"
    body = data[m.end():]
    if len(body) < 4 * W * H:
        raise IngestionError("truncated PFM data", path)
    a = np.frombuffer(body[: 4 * W * H], dtype=dtype).reshape(H, W)
    return np.flipud(a).astype(np.float64)


def write_grid(path, grid, meta: dict):
    """Float grid plus a JSON sidecar (same stem, ``.json``)."""
    path = Path(path)
    write_pfm(path, grid)
    write_json(path.with_suffix(".json"), meta)


def read_grid(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    return read_pfm(path), read_json(path.with_suffix(".json"))


def as_float32(grid) -> np.ndarray:
    """Round a float64 grid to the values the PFM format can hold."""
    return np.asarray(grid, dtype=np.float32).astype(np.float64)


# ---------------------------------------------------------------------------
# JSON / CSV


def _default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "to_dict"):
        return o.to_dict()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def dumps(obj, indent=2) -> str:
    return json.dumps(obj, indent=indent, default=_default, allow_nan=True)


def write_json(path, obj):
    Path(path).write_text(dumps(obj) + "\n")


def read_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise IngestionError(str(exc), path) from exc
    except json.JSONDecodeError as exc:
        raise IngestionError(f"invalid JSON: {exc}", path) from exc


def write_csv(path, rows: list[dict], columns: list[str] | None = None):
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in columns})


def config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"), default=_default)
    return hashlib.sha256(canon.encode()).hexdigest()


def versions() -> dict:
    import matplotlib
    import scipy

    from . import __version__

    return {
        "safeland": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "matplotlib": matplotlib.__version__,
        "platform": sys.platform,
    }


def write_manifest(run_dir, command: str, config: dict, seed=None, extra: dict | None = None):
    manifest = {
        "command": command,
        "config_hash": config_hash(config),
        "config": config,
        "seed": seed,
        "versions": versions(),
    }
    if extra:
        manifest.update(extra)
    write_json(Path(run_dir) / "manifest.json", manifest)
    return manifest
