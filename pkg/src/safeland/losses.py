"""Depth-completion loss terms with analytic gradients.

Every loss returns ``(value, grad)`` where ``grad`` is a full-size array of
d(value)/d(pred) (zero at unknown pixels).  All terms are means over the
pixels they touch, so values do not depend on sparse density.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateWarpError, EmptyInputError
from .geometry import CameraIntrinsics, Transform
from .image_quality import C1, C2, box3_adjoint, ssim_terms, window_mask

SSIM_MIX = 0.85
# samples this close outside the image still count (then clamp onto the edge), so
# rows that map exactly onto the border do not flicker in and out with rounding
EDGE_TOL = 1e-6


def _as_grid(x):
    return x.grid if hasattr(x, "grid") else np.asarray(x, dtype=float)


def _ref_overlap(pred, ref):
    p = _as_grid(pred)
    r = _as_grid(ref)
    if p.shape != r.shape:
        raise ValueError("prediction and reference must share dimensions")
    valid = np.isfinite(r) & np.isfinite(p)
    if not valid.any():
        raise EmptyInputError("reference has no valid pixel under the prediction")
    return p, r, valid


def loss_depth(pred, ref, with_grad: bool = False):
    """Mean squared error over pixels with a valid reference depth."""
    p, r, valid = _ref_overlap(pred, ref)
    e = p[valid] - r[valid]
    n = e.size
    val = float(np.dot(e, e) / n)
    if not with_grad:
        return val
    g = np.zeros(p.shape)
    g[valid] = 2.0 * e / n
    return val, g


def loss_ratio(pred, ref, with_grad: bool = False):
    """Mean |pred - ref| / ref over pixels with a valid reference depth."""
    p, r, valid = _ref_overlap(pred, ref)
    e = p[valid] - r[valid]
    n = e.size
    val = float(np.sum(np.abs(e) / r[valid]) / n)
    if not with_grad:
        return val
    g = np.zeros(p.shape)
    g[valid] = np.sign(e) / r[valid] / n
    return val, g


def loss_smooth(pred, with_grad: bool = False, soft: float = 0.0):
    """mean(|dx| + |dy|) with forward differences + mean |5-point Laplacian|.

    The first term is averaged over pixels whose right and lower neighbours
    are known, the second over pixels whose four neighbours are known.
    With ``soft`` > 0 every |d| becomes the Huber function of width
    ``soft`` (quadratic inside, |d| - soft/2 outside), which keeps descent
    methods from stalling on the kinks of near-planar maps; ``soft`` = 0 is
    the exact term.
    """
    p = _as_grid(pred)
    H, W = p.shape
    if H < 3 or W < 3:
        raise ValueError("smoothness needs at least a 3x3 map")
    k = np.isfinite(p)
    z = np.where(k, p, 0.0)
    g = np.zeros((H, W))
    val = 0.0
    # differences at rounding level are kinks, not slopes: use the zero subgradient
    eps = 1e-12 * float(np.max(np.abs(z), initial=0.0))

    def absval(d):
        if soft > 0:
            a = np.abs(d)
            return np.where(a < soft, 0.5 * d * d / soft, a - 0.5 * soft)
        return np.abs(d)

    def sign(d):
        if soft > 0:
            return np.clip(d / soft, -1.0, 1.0)
        return np.where(np.abs(d) > eps, np.sign(d), 0.0)

    first = k[:-1, :-1] & k[:-1, 1:] & k[1:, :-1]
    n1 = int(first.sum())
    if n1:
        dx = z[:-1, 1:] - z[:-1, :-1]
        dy = z[1:, :-1] - z[:-1, :-1]
        val += float(np.sum((absval(dx) + absval(dy))[first]) / n1)
        if with_grad:
            sx = np.where(first, sign(dx), 0.0) / n1
            sy = np.where(first, sign(dy), 0.0) / n1
            g[:-1, 1:] += sx
            g[:-1, :-1] -= sx
            g[1:, :-1] += sy
            g[:-1, :-1] -= sy

    second = k[1:-1, 1:-1] & k[:-2, 1:-1] & k[2:, 1:-1] & k[1:-1, :-2] & k[1:-1, 2:]
    n2 = int(second.sum())
    if n2:
        lap = z[:-2, 1:-1] + z[2:, 1:-1] + z[1:-1, :-2] + z[1:-1, 2:] - 4.0 * z[1:-1, 1:-1]
        val += float(np.sum(absval(lap)[second]) / n2)
        if with_grad:
            s = np.where(second, sign(lap), 0.0) / n2
            g[:-2, 1:-1] += s
            g[2:, 1:-1] += s
            g[1:-1, :-2] += s
            g[1:-1, 2:] += s
            g[1:-1, 1:-1] -= 4.0 * s
    if not with_grad:
        return val
    return val, np.where(k, g, 0.0)


# ---------------------------------------------------------------------------
# photometric


def _bilinear(img, u, v):
    """Sample ``img`` at (u, v); returns values and d/du, d/dv."""
    H, W = img.shape
    u0 = np.clip(np.floor(u).astype(np.int64), 0, W - 2)
    v0 = np.clip(np.floor(v).astype(np.int64), 0, H - 2)
    fu = u - u0
    fv = v - v0
    a = img[v0, u0]
    b = img[v0, u0 + 1]
    c = img[v0 + 1, u0]
    d = img[v0 + 1, u0 + 1]
    top = a + fu * (b - a)
    bot = c + fu * (d - c)
    val = top + fv * (bot - top)
    du = (1 - fv) * (b - a) + fv * (d - c)
    dv = bot - top
    return val, du, dv


def inverse_warp(neighbor, depth, T_nc: Transform, K: CameraIntrinsics, with_jacobian: bool = False):
    """Sample ``neighbor`` at the projection of every current-view pixel.

    ``T_nc`` maps current-camera points into the neighbour camera.  Returns
    the warped image (NaN where invalid) and the validity mask, plus
    dI'/dz per pixel when ``with_jacobian`` is set.
    """
    z = _as_grid(depth)
    img = np.asarray(neighbor, dtype=float)
    H, W = z.shape
    known = np.isfinite(z)
    rays = K.rays()
    zz = np.where(known, z, 1.0)
    X = rays * zz[..., None]
    R = T_nc.matrix
    Y = X @ R.T + T_nc.translation
    Yz = Y[..., 2]
    front = Yz > 1e-9
    safe_z = np.where(front, Yz, 1.0)
    u = K.focal * Y[..., 0] / safe_z + K.cx
    v = K.focal * Y[..., 1] / safe_z + K.cy
    valid = known & front & (u >= -EDGE_TOL) & (u <= W - 1 + EDGE_TOL) & (v >= -EDGE_TOL) & (v <= H - 1 + EDGE_TOL)
    u = np.clip(u, 0, W - 1)
    v = np.clip(v, 0, H - 1)
    warped = np.full((H, W), np.nan)
    jac = np.zeros((H, W))
    if valid.any():
        val, du, dv = _bilinear(img, u[valid], v[valid])
        warped[valid] = val
        if with_jacobian:
            dY = rays @ R.T  # dY/dz
            Yv = Y[valid]
            dYv = dY[valid]
            yz = Yv[:, 2]
            dudz = K.focal * (dYv[:, 0] * yz - Yv[:, 0] * dYv[:, 2]) / yz**2
            dvdz = K.focal * (dYv[:, 1] * yz - Yv[:, 1] * dYv[:, 2]) / yz**2
            jac[valid] = du * dudz + dv * dvdz
    if with_jacobian:
        return warped, valid, jac
    return warped, valid


def _ssim_mean_and_grad(x, y, inner):
    """Mean SSIM over ``inner`` windows and its gradient w.r.t. ``x``."""
    mu_x, mu_y, var_x, var_y, cov = ssim_terms(x, y)
    A = 2 * mu_x * mu_y + C1
    B = 2 * cov + C2
    Cc = mu_x**2 + mu_y**2 + C1
    D = var_x + var_y + C2
    s = A * B / (Cc * D)
    n = int(inner.sum())
    mean = float(np.mean(s[inner]))
    w = np.where(inner, 1.0 / n, 0.0)
    with np.errstate(invalid="ignore"):
        a = np.where(inner, 2 * mu_y * B / (Cc * D) - s * 2 * mu_x / Cc, 0.0) * w
        b = np.where(inner, -s / D, 0.0) * w
        c = np.where(inner, 2 * A / (Cc * D), 0.0) * w
        mxz = np.where(inner, mu_x, 0.0)
        myz = np.where(inner, mu_y, 0.0)
    const = box3_adjoint(a - 2 * b * mxz - c * myz)
    grad = const + 2 * x * box3_adjoint(b) + y * box3_adjoint(c)
    return mean, grad


def photometric_single(pred, current, neighbor, T_nc, K, alpha=SSIM_MIX, with_grad=False):
    """alpha·(1 - SSIM(I', I))/2 + (1 - alpha)·mean|I' - I| for one neighbour."""
    cur = np.asarray(current, dtype=float)
    warped, valid, jac = inverse_warp(neighbor, pred, T_nc, K, with_jacobian=True)
    inner = window_mask(valid)
    if not valid.any() or not inner.any():
        raise DegenerateWarpError("no pixel survives the warp")
    x = np.where(valid, warped, 0.0)
    y = np.where(valid, cur, 0.0)
    nv = int(valid.sum())
    diff = x - y
    l1 = float(np.sum(np.abs(diff[valid])) / nv)
    if with_grad:
        s_mean, s_grad = _ssim_mean_and_grad(x, y, inner)
    else:
        s_mean = float(np.mean(_ssim_map_masked(x, y)[inner]))
    val = alpha * (1.0 - s_mean) / 2.0 + (1.0 - alpha) * l1
    if not with_grad:
        return val
    dI = -alpha / 2.0 * s_grad + (1.0 - alpha) * np.where(valid, np.sign(diff), 0.0) / nv
    g = np.where(valid, dI * jac, 0.0)
    return val, g


def _ssim_map_masked(x, y):
    mu_x, mu_y, var_x, var_y, cov = ssim_terms(x, y)
    return (2 * mu_x * mu_y + C1) * (2 * cov + C2) / ((mu_x**2 + mu_y**2 + C1) * (var_x + var_y + C2))


def loss_photometric(pred, current, neighbors, K, alpha=SSIM_MIX, with_grad=False):
    """Mean over ``neighbors`` [(image, T_neighbor_current), ...] of the
    single-neighbour photometric error of the inverse-warped neighbour."""
    neighbors = list(neighbors)
    if not neighbors:
        raise ValueError("photometric loss needs at least one neighbour")
    total = 0.0
    grad = np.zeros(_as_grid(pred).shape)
    for img, T in neighbors:
        r = photometric_single(pred, current, img, T, K, alpha, with_grad)
        if with_grad:
            total += r[0]
            grad += r[1]
        else:
            total += r
    n = len(neighbors)
    if with_grad:
        return total / n, grad / n
    return total / n
