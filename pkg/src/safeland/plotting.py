"""Figures written to files for CLI reports (non-interactive backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STATE_COLORS = {
    "select-site": "tab:blue",
    "wander": "tab:orange",
    "descend": "tab:green",
    "confirm-site": "tab:purple",
    "final-descend": "tab:red",
    "landed": "k",
    "abort": "tab:gray",
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def trajectory_figure(trajectory, path, touchdown=None, title=None):
    """Top view and altitude profile of an episode, colored by state."""
    t = np.array([r[0] for r in trajectory])
    xyz = np.array([r[1:4] for r in trajectory], dtype=float)
    states = [r[4] for r in trajectory]
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(10, 4.2))
    for st in dict.fromkeys(states):
        m = np.array([s == st for s in states])
        c = STATE_COLORS.get(st, "k")
        ax0.scatter(xyz[m, 0], xyz[m, 1], s=4, color=c, label=st)
        ax1.scatter(t[m], xyz[m, 2], s=4, color=c)
    ax0.plot(xyz[:, 0], xyz[:, 1], lw=0.5, color="0.6", zorder=0)
    if touchdown is not None:
        ax0.plot(touchdown[0], touchdown[1], "kx", ms=10, mew=2)
    ax0.set_xlabel("x [m]")
    ax0.set_ylabel("y [m]")
    ax0.set_aspect("equal", adjustable="datalim")
    ax0.legend(fontsize=7, markerscale=3)
    ax1.set_xlabel("t [s]")
    ax1.set_ylabel("z [m]")
    if title:
        fig.suptitle(title)
    return _save(fig, path)


def site_figure(image, depth, mask, candidate, path):
    """Image, level depth, raw and refined safety masks with the chosen disc."""
    panels = [("image", image, "gray"), ("plane depth", depth, "viridis"),
              ("raw mask", mask.raw, "gray"), ("refined mask", mask.refined, "gray")]
    panels = [p for p in panels if p[1] is not None]
    fig, axes = plt.subplots(1, len(panels), figsize=(3.2 * len(panels), 3.4))
    for ax, (name, a, cmap) in zip(np.atleast_1d(axes), panels):
        im = ax.imshow(np.asarray(a, dtype=float), cmap=cmap, interpolation="nearest")
        ax.set_title(name)
        ax.set_xticks([])
        ax.set_yticks([])
        if name == "plane depth":
            fig.colorbar(im, ax=ax, fraction=0.046)
        if name == "refined mask" and candidate is not None:
            r, c = candidate.center_px
            ax.add_patch(plt.Circle((c, r), candidate.radius_px, fill=False, color="tab:red", lw=1.5))
            ax.set_xlabel(f"R = {candidate.radius_m:.2f} m")
    return _save(fig, path)


def density_figure(table, path):
    """RMSE and reconstruction SSIM against input density."""
    d = [r["density"] for r in table]
    fig, ax0 = plt.subplots(figsize=(5, 3.6))
    ax0.plot(d, [r["rmse"] for r in table], "o-", color="tab:blue")
    ax0.set_xlabel("input density")
    ax0.set_ylabel("RMSE [mm]", color="tab:blue")
    ssim = [r.get("ssim") for r in table]
    if all(s is not None for s in ssim):
        ax1 = ax0.twinx()
        ax1.plot(d, ssim, "s--", color="tab:red")
        ax1.set_ylabel("SSIM", color="tab:red")
    return _save(fig, path)


def coverage_figure(times, fractions, path, curve=None):
    fig, ax = plt.subplots(figsize=(5, 3.6))
    if curve is not None:
        ax.plot(curve[0], curve[1], color="0.6", lw=1)
    ax.plot(times, fractions, "o", color="tab:blue")
    ax.set_xlabel("integration time [s]")
    ax.set_ylabel("covered fraction")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def residual_figure(residuals_px, path):
    """Per-correspondence reprojection residual vectors."""
    r = np.asarray(residuals_px, dtype=float).reshape(-1, 2)
    fig, ax = plt.subplots(figsize=(4.2, 4))
    ax.scatter(r[:, 0], r[:, 1], s=8)
    ax.axhline(0, color="0.7", lw=0.5)
    ax.axvline(0, color="0.7", lw=0.5)
    ax.set_xlabel("du [px]")
    ax.set_ylabel("dv [px]")
    ax.set_aspect("equal", adjustable="datalim")
    return _save(fig, path)
