"""Depth prediction: composite-loss refinement, the predictor interface,
dynamic-time completion and evaluation metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Protocol

import numpy as np

from .depth_fusion import AccumulationBuffer, nn_interpolate, rasterize_sparse
from .errors import (
    DegenerateWarpError,
    EmptyInputError,
    NoInputError,
    OptimizerStallError,
    StreamExhaustedError,
)
from .geometry import CameraIntrinsics, Transform
from .image_quality import EvalResult, evaluate_prediction
from .losses import SSIM_MIX, loss_depth, loss_photometric, loss_ratio, loss_smooth
from .maps import DepthMap, SparseDepth

log = logging.getLogger(__name__)

MIN_DEPTH = 0.05


@dataclass(frozen=True)
class LossWeights:
    alpha_d: float = 1.0
    alpha_r: float = 1.0
    alpha_p: float = 2.0
    alpha_s: float = 1.0
    alpha_ssim: float = SSIM_MIX

    def __post_init__(self):
        if min(self.alpha_d, self.alpha_r, self.alpha_p, self.alpha_s, self.alpha_ssim) < 0:
            raise ValueError("loss weights must be non-negative")

    def is_zero(self) -> bool:
        return self.alpha_d == self.alpha_r == self.alpha_p == self.alpha_s == 0


@dataclass(frozen=True)
class RefineOptions:
    max_iters: int = 200
    step: float = 1e-3
    tol: float = 1e-7
    armijo: float = 1e-4
    max_backtracks: int = 10
    kink_width: float = 0.01  # meters; Huber width of the smoothness term


@dataclass(frozen=True)
class DensityPolicy:
    p_image_only: float = 0.2
    density_range: tuple = (0.1, 0.5)

    def __post_init__(self):
        lo, hi = self.density_range
        if not 0 <= self.p_image_only <= 1:
            raise ValueError("p_image_only must be a probability")
        if not 0 <= lo <= hi <= 1:
            raise ValueError("density_range must lie within [0, 1]")


@dataclass
class DepthMetrics:
    rmse: float
    rel: float
    delta: float
    ssim_recon: float | None = None
    count: int = 0

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# composite objective


class CompositeLoss:
    """C = a_d·C_d + a_r·C_r + a_p·C_p + a_s·C_s evaluated on a fixed pixel mask."""

    def __init__(self, mask, sparse, current, neighbors, K, weights: LossWeights, kink_width: float = 0.0):
        self.mask = mask
        self.kink_width = kink_width
        self.K = K
        self.weights = weights
        self.current = current
        self.neighbors = list(neighbors or [])
        self.ref = None
        if sparse is not None and not sparse.is_empty():
            ref = np.where(mask, sparse.grid, np.nan)
            if np.isfinite(ref).any():
                self.ref = ref
        self.use_d = weights.alpha_d > 0 and self.ref is not None
        self.use_r = weights.alpha_r > 0 and self.ref is not None
        self.use_p = weights.alpha_p > 0 and current is not None and bool(self.neighbors)
        self.use_s = weights.alpha_s > 0

    @property
    def active(self) -> bool:
        return self.use_d or self.use_r or self.use_p or self.use_s

    def grid(self, x):
        g = np.full(self.mask.shape, np.nan)
        g[self.mask] = x
        return g

    def __call__(self, x, with_grad=True):
        z = self.grid(x)
        w = self.weights
        total = 0.0
        grad = np.zeros(self.mask.shape)
        terms = []
        if self.use_d:
            terms.append((w.alpha_d, loss_depth(z, self.ref, with_grad)))
        if self.use_r:
            terms.append((w.alpha_r, loss_ratio(z, self.ref, with_grad)))
        if self.use_p:
            terms.append((w.alpha_p, loss_photometric(z, self.current, self.neighbors, self.K, w.alpha_ssim, with_grad)))
        if self.use_s:
            terms.append((w.alpha_s, loss_smooth(z, with_grad, self.kink_width)))
        for a, r in terms:
            if with_grad:
                total += a * r[0]
                grad += a * r[1]
            else:
                total += a * r
        if with_grad:
            return total, grad[self.mask]
        return total


def refine_depth(seed: DepthMap, sparse: SparseDepth | None, current, neighbors, K: CameraIntrinsics,
                 weights: LossWeights = LossWeights(), opts: RefineOptions = RefineOptions(),
                 history: list | None = None) -> DepthMap:
    """Gradient descent with Armijo backtracking on the composite loss.

    Optimizes the depth of every known pixel of ``seed``.  Returns the
    lowest-cost iterate.  Raises :class:`OptimizerStallError` (carrying that
    iterate) when ``max_backtracks`` halvings in a row fail to decrease C.
    If ``history`` is given, the accepted cost sequence is appended to it.
    """
    mask = seed.known
    if not mask.any():
        raise EmptyInputError("seed depth has no known pixel")
    objective = CompositeLoss(mask, sparse, current, neighbors, K, weights, opts.kink_width)
    if not objective.active:
        return seed.copy()
    x = seed.grid[mask].copy()
    try:
        c, g = objective(x)
    except DegenerateWarpError:
        # no usable neighbour overlap; drop the photometric term
        objective.use_p = False
        if not objective.active:
            return seed.copy()
        c, g = objective(x)
    if history is not None:
        history.append(c)
    step = None
    x_prev = g_prev = None
    for it in range(opts.max_iters):
        gg = float(np.dot(g, g))
        if gg == 0.0 or not np.isfinite(gg):
            break
        if x_prev is not None:
            s = x - x_prev
            yv = g - g_prev
            sy = float(np.dot(s, yv))
            step = float(np.dot(s, s)) / sy if sy > 0 else 2.0 * step
        if step is None or not np.isfinite(step) or step <= 0:
            step = opts.step / max(float(np.max(np.abs(g))), 1e-300)
        accepted = False
        for _ in range(opts.max_backtracks):
            x_new = np.maximum(x - step * g, MIN_DEPTH)
            try:
                c_new, g_new = objective(x_new)
            except DegenerateWarpError:
                c_new = math.inf
            if c_new <= c - opts.armijo * step * gg:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            raise OptimizerStallError(
                f"line search failed {opts.max_backtracks} times at iteration {it}",
                best=DepthMap(objective.grid(x), seed.kind), best_cost=c,
            )
        x_prev, g_prev = x, g
        decrease = c - c_new
        x, c, g = x_new, c_new, g_new
        if history is not None:
            history.append(c)
        # the first step is deliberately cautious, so judge convergence from the second on
        if it > 0 and decrease <= opts.tol * max(abs(c), 1e-12):
            break
    return DepthMap(objective.grid(x), seed.kind)


# ---------------------------------------------------------------------------
# predictor interface


class DepthPredictor(Protocol):
    """(image?, sparse?, context) -> DepthMap.  Learned models plug in here."""

    def __call__(self, image, sparse: SparseDepth | None, context: "PredictionContext") -> DepthMap: ...


@dataclass
class PredictionContext:
    K: CameraIntrinsics
    fov_mask: np.ndarray | None = None
    altitude_prior: float | None = None
    neighbors: list = field(default_factory=list)
    weights: LossWeights = LossWeights()
    opts: RefineOptions = RefineOptions()


SWEEP_SPAN = 0.4  # log-depth half range searched around the prior
SWEEP_STEPS = 33
SWEEP_MIN_GAIN = 1e-3


def plane_sweep(seed: DepthMap, current, neighbors, K: CameraIntrinsics, alpha=SSIM_MIX) -> DepthMap:
    """Best constant depth near the seed's value by photometric loss.

    Per-pixel descent only finds the nearest local minimum of the photometric
    term, so an image-only seed is first moved to the best fronto-parallel
    plane.  The seed is kept unless a candidate lowers the loss by a clear
    relative margin (textureless views stay at the prior).
    """
    known = seed.known
    z0 = float(np.median(seed.grid[known]))

    def cost(z):
        try:
            return loss_photometric(np.where(known, z, np.nan), current, neighbors, K, alpha)
        except DegenerateWarpError:
            return math.inf

    base = cost(z0)
    zs = z0 * np.exp(np.linspace(-SWEEP_SPAN, SWEEP_SPAN, SWEEP_STEPS))
    costs = np.array([cost(z) for z in zs])
    best = int(np.argmin(costs))
    if not costs[best] < base * (1.0 - SWEEP_MIN_GAIN):
        return seed
    return DepthMap(np.where(known, zs[best], np.nan), seed.kind)


class VariationalPredictor:
    """Reference predictor: NN-interpolated seed (or flat prior) refined on C."""

    def __call__(self, image, sparse, context: PredictionContext) -> DepthMap:
        K = context.K
        fov = context.fov_mask if context.fov_mask is not None else np.ones(K.shape, dtype=bool)
        has_sparse = sparse is not None and not sparse.is_empty()
        if has_sparse:
            seed = nn_interpolate(sparse, fov)
        else:
            if context.altitude_prior is None:
                raise NoInputError("image-only prediction needs an altitude prior")
            seed = DepthMap.constant(K.shape, context.altitude_prior, fov)
        neighbors = context.neighbors if image is not None else []
        if not has_sparse and neighbors and context.weights.alpha_p > 0:
            seed = plane_sweep(seed, image, neighbors, K, context.weights.alpha_ssim)
        try:
            return refine_depth(seed, sparse if has_sparse else None, image, neighbors, K,
                                context.weights, context.opts)
        except OptimizerStallError as exc:
            log.debug("refinement stalled, keeping best iterate: %s", exc)
            return exc.best


def predict(image, sparse, context: PredictionContext, predictor: DepthPredictor | None = None) -> DepthMap:
    has_sparse = sparse is not None and not sparse.is_empty()
    if image is None and not has_sparse:
        raise NoInputError("predict needs an image or sparse depth")
    predictor = predictor or VariationalPredictor()
    return predictor(image, sparse if has_sparse else None, context)


def sample_density(policy: DensityPolicy, seed=None) -> float:
    """Training-style density draw: 0 with p_image_only, else uniform in range."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if rng.random() < policy.p_image_only:
        return 0.0
    lo, hi = policy.density_range
    return float(rng.uniform(lo, hi))


# ---------------------------------------------------------------------------
# dynamic-time completion


@dataclass
class StereoFrame:
    """Reference stereo pair plus everything the predictor needs."""

    left: np.ndarray
    right: np.ndarray
    T_rl: Transform
    context: PredictionContext
    timestamp: float = 0.0


@dataclass
class LidarPacket:
    """Points already aligned into the reference camera frame."""

    offset: float  # seconds after the reference image
    times: np.ndarray
    points_cam: np.ndarray


@dataclass
class CompletionResult:
    depth: DepthMap
    accumulation_time: float
    accepted: bool
    evaluations: list = field(default_factory=list)
    sparse: SparseDepth | None = None


def dynamic_completion(frame_stream: Iterable, buffer: AccumulationBuffer,
                       evaluator: Callable[..., EvalResult] = evaluate_prediction,
                       deadline: float = 1.0, predictor: DepthPredictor | None = None,
                       supersample: int = 1) -> CompletionResult:
    """Predict, self-evaluate, and re-predict as LiDAR accumulates.

    ``frame_stream`` yields one :class:`StereoFrame` followed by
    :class:`LidarPacket` items.  Returns on the first accepted prediction;
    once the next packet would pass ``deadline`` (or the stream ends) the
    full buffer is nearest-neighbour interpolated inside the FOV instead and
    ``accepted`` is False.
    """
    it = iter(frame_stream)
    try:
        frame = next(it)
    except StopIteration:
        raise StreamExhaustedError("sensor stream ended before the first prediction") from None
    if not isinstance(frame, StereoFrame):
        raise TypeError("frame_stream must start with a StereoFrame")
    ctx = frame.context
    K = ctx.K
    if len(buffer) == 0:
        buffer.reset(frame.timestamp)
    evals = []

    def current_sparse():
        t, p = buffer.snapshot()
        return rasterize_sparse(p, K, t, buffer.reference_time)

    def attempt(sparse, elapsed):
        if sparse is None and ctx.altitude_prior is None:
            return None
        pred = predict(frame.left, sparse, ctx, predictor)
        ev = evaluator(frame.left, frame.right, pred, sparse, frame.T_rl, K, fov_mask=ctx.fov_mask,
                       supersample=supersample)
        evals.append((elapsed, ev))
        if ev.accepted:
            return CompletionResult(pred, elapsed, True, evals, sparse)
        return None

    elapsed = 0.0
    if deadline > 0:
        sparse = current_sparse()
        res = attempt(None if sparse.is_empty() else sparse, elapsed)
        if res is not None:
            return res
        for pkt in it:
            if pkt.offset > deadline + 1e-9:
                break
            buffer.extend(pkt.times, pkt.points_cam)
            elapsed = pkt.offset
            sparse = current_sparse()
            if sparse.is_empty():
                continue
            res = attempt(sparse, elapsed)
            if res is not None:
                return res
    sparse = current_sparse()
    if sparse.is_empty():
        # nothing accumulated yet (e.g. deadline 0): wait for the first returns
        for pkt in it:
            buffer.extend(pkt.times, pkt.points_cam)
            elapsed = pkt.offset
            sparse = current_sparse()
            if not sparse.is_empty():
                break
        else:
            raise StreamExhaustedError("no LiDAR returns available for the fallback map")
    fov = ctx.fov_mask if ctx.fov_mask is not None else np.ones(K.shape, dtype=bool)
    return CompletionResult(nn_interpolate(sparse, fov), elapsed, False, evals, sparse)


# ---------------------------------------------------------------------------
# metrics


def compute_metrics(pred: DepthMap, gt, delta_threshold: float = 1.25) -> DepthMetrics:
    """RMSE and REL (mm) plus the δ-accuracy fraction over jointly valid pixels."""
    p = pred.grid
    g = gt.grid
    both = np.isfinite(p) & np.isfinite(g)
    if not both.any():
        raise EmptyInputError("prediction and ground truth share no valid pixel")
    pv = p[both]
    gv = g[both]
    err = pv - gv
    rmse = float(np.sqrt(np.mean(err**2)) * 1000.0)
    rel = float(np.mean(np.abs(err) / gv) * 1000.0)
    ratio = np.maximum(pv / gv, gv / pv)
    delta = float(np.mean(ratio < delta_threshold))
    return DepthMetrics(rmse, rel, delta, None, int(both.sum()))
