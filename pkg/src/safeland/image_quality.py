"""Windowed SSIM, forward-splat view synthesis and the stereo self-evaluation rule."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .depth_fusion import nn_interpolate
from .errors import DegenerateWarpError, EmptyInputError
from .geometry import CameraIntrinsics, Transform
from .maps import DepthMap, SparseDepth

C1 = 0.01**2
C2 = 0.03**2
ADDITIVE_MARGIN = 0.2

_WINDOW = np.ones((3, 3), dtype=bool)


def box3(x: np.ndarray) -> np.ndarray:
    """3x3 window mean; border rows/columns are left as NaN."""
    out = np.full(x.shape, np.nan)
    H, W = x.shape
    if H < 3 or W < 3:
        return out
    acc = np.zeros((H - 2, W - 2))
    for dy in range(3):
        for dx in range(3):
            acc += x[dy : dy + H - 2, dx : dx + W - 2]
    out[1:-1, 1:-1] = acc / 9.0
    return out


def box3_adjoint(g: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`box3` restricted to interior entries of ``g``.

    Given per-window weights ``g`` (zeros outside the interior), returns for
    each pixel the sum over windows containing it, divided by 9.
    """
    H, W = g.shape
    out = np.zeros((H, W))
    inner = g[1:-1, 1:-1]
    for dy in range(3):
        for dx in range(3):
            out[dy : dy + H - 2, dx : dx + W - 2] += inner
    return out / 9.0


def window_mask(valid: np.ndarray) -> np.ndarray:
    """Pixels whose whole 3x3 window lies inside the image and inside ``valid``."""
    return ndimage.binary_erosion(valid, structure=_WINDOW, border_value=0)


def ssim_terms(a: np.ndarray, b: np.ndarray):
    """Window statistics (mu_a, mu_b, var_a, var_b, cov) with a 3x3 box filter."""
    mu_a = box3(a)
    mu_b = box3(b)
    var_a = box3(a * a) - mu_a**2
    var_b = box3(b * b) - mu_b**2
    cov = box3(a * b) - mu_a * mu_b
    return mu_a, mu_b, var_a, var_b, cov


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    mu_a, mu_b, var_a, var_b, cov = ssim_terms(a, b)
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a**2 + mu_b**2 + C1) * (var_a + var_b + C2)
    return num / den


def ssim(a, b, valid_mask=None) -> float:
    """Mean 3x3-box SSIM over pixels whose full window is valid in both images."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("images must share dimensions")
    valid = np.isfinite(a) & np.isfinite(b)
    if valid_mask is not None:
        valid &= np.asarray(valid_mask, dtype=bool)
    inner = window_mask(valid)
    if not inner.any():
        raise EmptyInputError("no pixel has a fully valid 3x3 window")
    a0 = np.where(valid, a, 0.0)
    b0 = np.where(valid, b, 0.0)
    return float(np.mean(ssim_map(a0, b0)[inner]))


# ---------------------------------------------------------------------------
# view synthesis


def synthesize_view(source, source_depth: DepthMap, T_target_source: Transform, K: CameraIntrinsics,
                    supersample: int = 1):
    """Forward-splat ``source`` into the target view using per-pixel plane depth.

    Each source sample is back-projected, moved by ``T_target_source`` and
    splatted to its nearest target pixel; a z-buffer keeps the nearest sample.
    With ``supersample`` > 1 every source pixel is split into s×s sub-samples
    carrying the pixel's intensity and depth, splatted onto an s-times finer
    target grid, and the fine grid is averaged back over its hit sub-cells.

    Returns ``(image, valid_mask)``; unhit target pixels are NaN / False.
    """
    src = np.asarray(source, dtype=float)
    depth = source_depth.grid
    H, W = src.shape
    s = int(supersample)
    known = np.isfinite(depth) & np.isfinite(src)
    if not known.any():
        raise DegenerateWarpError("source depth has no known pixel")
    v, u = np.nonzero(known)
    z = depth[v, u]
    vals = src[v, u]
    if s > 1:
        off = (np.arange(s) + 0.5) / s - 0.5
        ou, ov = np.meshgrid(off, off)
        u = (u[:, None] + ou.ravel()[None, :]).ravel()
        v = (v[:, None] + ov.ravel()[None, :]).ravel()
        z = np.repeat(z, s * s)
        vals = np.repeat(vals, s * s)
    else:
        u = u.astype(float)
        v = v.astype(float)
    pts = np.column_stack([(u - K.cx) / K.focal * z, (v - K.cy) / K.focal * z, z])
    q = T_target_source.apply(pts)
    front = q[:, 2] > 1e-9
    q = q[front]
    vals = vals[front]
    tu = K.focal * q[:, 0] / q[:, 2] + K.cx
    tv = K.focal * q[:, 1] / q[:, 2] + K.cy
    # nearest cell on the (possibly refined) target grid
    gu = np.floor((tu + 0.5) * s).astype(np.int64)
    gv = np.floor((tv + 0.5) * s).astype(np.int64)
    Hs, Ws = H * s, W * s
    inside = (gu >= 0) & (gu < Ws) & (gv >= 0) & (gv < Hs)
    if not inside.any():
        raise DegenerateWarpError("no pixel lands inside the target view")
    gu, gv, zq, vals = gu[inside], gv[inside], q[inside, 2], vals[inside]
    flat = gv * Ws + gu
    # z-buffer: sort by (cell, depth) and keep the first sample of each cell
    order = np.lexsort((zq, flat))
    flat_sorted = flat[order]
    first = np.ones(flat_sorted.size, dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    cells = flat_sorted[first]
    fine = np.full(Hs * Ws, np.nan)
    fine[cells] = vals[order][first]
    fine = fine.reshape(Hs, Ws)
    if s == 1:
        return fine, np.isfinite(fine)
    blocks = fine.reshape(H, s, W, s)
    hits = np.isfinite(blocks).sum(axis=(1, 3))
    total = np.nansum(blocks, axis=(1, 3))
    # a coarse pixel is valid when most of its sub-cells were hit
    valid = hits * 2 > s * s
    out = np.where(valid, total / np.maximum(hits, 1), np.nan)
    return out, valid


# ---------------------------------------------------------------------------
# self-evaluation


@dataclass
class EvalResult:
    sim: float
    sim_d: float | None
    sim_pred: float
    accepted: bool

    def to_dict(self):
        return asdict(self)


def acceptance_rule(sim: float, sim_d: float | None, sim_pred: float) -> bool:
    """Accept when sim_pred clears the bound midpoint or beats the raw pair by 0.2."""
    if sim_pred > sim + ADDITIVE_MARGIN:
        return True
    if sim_d is None:
        return False
    return sim_pred > (sim + sim_d) / 2.0


def _clamp01(x: float) -> float:
    return float(min(1.0, max(0.0, x)))


def _recon_ssim(I_l, I_r, depth: DepthMap, T_rl, K, supersample) -> float:
    try:
        recon, mask = synthesize_view(I_l, depth, T_rl, K, supersample)
    except DegenerateWarpError:
        return 0.0
    try:
        return _clamp01(ssim(recon, I_r, mask))
    except EmptyInputError:
        return 0.0


def evaluate_prediction(I_l, I_r, pred: DepthMap, sparse: SparseDepth | None, T_rl: Transform, K: CameraIntrinsics,
                        fov_mask=None, supersample: int = 1) -> EvalResult:
    """Score a predicted depth by how well it re-synthesizes the right image."""
    sim = _clamp01(ssim(I_l, I_r))
    sim_pred = _recon_ssim(I_l, I_r, pred, T_rl, K, supersample)
    sim_d = None
    if sparse is not None and not sparse.is_empty():
        if fov_mask is None:
            fov_mask = pred.known
        dense_d = nn_interpolate(sparse, fov_mask)
        sim_d = _recon_ssim(I_l, I_r, dense_d, T_rl, K, supersample)
    return EvalResult(sim, sim_d, sim_pred, acceptance_rule(sim, sim_d, sim_pred))
