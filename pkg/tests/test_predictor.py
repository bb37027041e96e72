import numpy as np
import pytest

from safeland.depth_fusion import AccumulationBuffer, nn_interpolate
from safeland.errors import EmptyInputError, NoInputError, OptimizerStallError, StreamExhaustedError
from safeland.geometry import Transform, backproject
from safeland.image_quality import EvalResult, evaluate_prediction
from safeland.maps import DepthMap, SparseDepth
from safeland.predictor import (
    DensityPolicy,
    LidarPacket,
    LossWeights,
    PredictionContext,
    RefineOptions,
    StereoFrame,
    compute_metrics,
    dynamic_completion,
    predict,
    refine_depth,
    sample_density,
)
from safeland.terrain import TerrainSpec, build_terrain, nadir_camera_pose, render_frame

BASELINE = 0.5


def scene(K, texture="noise", altitude=10.0, seed=0):
    terrain = build_terrain(TerrainSpec(features=[{"type": "plane", "slope": 4.0}], texture=texture,
                                        texture_wavelength=1.0, texture_seed=seed))
    left = nadir_camera_pose(0, 0, altitude)
    T_lr = Transform.translate(BASELINE, 0, 0)
    fl = render_frame(terrain, left, K)
    fr = render_frame(terrain, left.compose(T_lr), K)
    return fl, fr, T_lr.inverse()


def sparse_from_truth(truth, density, seed=0):
    rng = np.random.default_rng(seed)
    return SparseDepth.from_dense(truth, rng.random(truth.shape) < density)


def rmse(a, b):
    m = np.isfinite(a) & np.isfinite(b)
    return float(np.sqrt(np.mean((a[m] - b[m]) ** 2)))


# -- weights and policy ---------------------------------------------------------


def test_default_weights():
    w = LossWeights()
    assert (w.alpha_d, w.alpha_r, w.alpha_p, w.alpha_s, w.alpha_ssim) == (1.0, 1.0, 2.0, 1.0, 0.85)
    with pytest.raises(ValueError):
        LossWeights(alpha_d=-1)


def test_density_policy_extremes():
    assert all(sample_density(DensityPolicy(p_image_only=1.0), s) == 0.0 for s in range(50))
    assert all(0.1 <= sample_density(DensityPolicy(p_image_only=0.0), s) <= 0.5 for s in range(50))
    with pytest.raises(ValueError):
        DensityPolicy(p_image_only=1.5)


def test_density_policy_zero_fraction():
    rng = np.random.default_rng(0)
    draws = np.array([sample_density(DensityPolicy(), rng) for _ in range(100_000)])
    assert abs(np.mean(draws == 0) - 0.2) <= 0.01
    assert np.all((draws == 0) | ((draws >= 0.1) & (draws <= 0.5)))


# -- refinement ---------------------------------------------------------------


def test_zero_weights_return_seed(K64):
    fl, fr, T_rl = scene(K64)
    seed = DepthMap(fl.true_depth.grid + 0.3)
    w = LossWeights(0, 0, 0, 0)
    out = refine_depth(seed, sparse_from_truth(fl.true_depth.grid, 0.3), fl.image, [(fr.image, T_rl)], K64, w)
    assert np.array_equal(out.grid, seed.grid)


def test_truth_is_near_stationary(K64):
    fl, fr, T_rl = scene(K64)
    truth = fl.true_depth.grid
    out = refine_depth(fl.true_depth, sparse_from_truth(truth, 0.3), fl.image, [(fr.image, T_rl)], K64,
                       opts=RefineOptions(max_iters=50))
    assert rmse(out.grid, truth) < 0.01


def test_refinement_removes_bias(K64):
    fl, fr, T_rl = scene(K64)
    truth = fl.true_depth.grid
    seed = DepthMap(truth + 0.5)
    out = refine_depth(seed, sparse_from_truth(truth, 0.3), fl.image, [(fr.image, T_rl)], K64,
                       opts=RefineOptions(max_iters=50))
    assert rmse(out.grid, truth) < rmse(seed.grid, truth)


def test_cost_never_increases(K64):
    fl, fr, T_rl = scene(K64)
    history = []
    refine_depth(DepthMap(fl.true_depth.grid * 1.1), sparse_from_truth(fl.true_depth.grid, 0.1), fl.image,
                 [(fr.image, T_rl)], K64, opts=RefineOptions(max_iters=40), history=history)
    assert len(history) > 2
    assert all(b <= a for a, b in zip(history, history[1:]))


def test_stall_error_carries_best_iterate(K64):
    fl, fr, T_rl = scene(K64)
    with pytest.raises(OptimizerStallError) as exc:
        # zero backtracking budget: the very first line search fails
        refine_depth(DepthMap(fl.true_depth.grid + 1.0), sparse_from_truth(fl.true_depth.grid, 0.3), fl.image,
                     [(fr.image, T_rl)], K64, opts=RefineOptions(max_backtracks=0))
    assert np.array_equal(exc.value.best.grid, fl.true_depth.grid + 1.0)


def test_refine_needs_known_seed(K64):
    with pytest.raises(EmptyInputError):
        refine_depth(DepthMap(np.full((64, 64), np.nan)), None, None, [], K64)


# -- predict -----------------------------------------------------------------


def test_image_only_moves_toward_truth(K64):
    fl, fr, T_rl = scene(K64)
    ctx = PredictionContext(K64, altitude_prior=12.0, neighbors=[(fr.image, T_rl)],
                            opts=RefineOptions(max_iters=100))
    out = predict(fl.image, None, ctx)
    c = slice(16, 48)
    assert abs(np.mean(out.grid[c, c]) - 10.0) < abs(12.0 - 10.0)


def test_dense_sparse_is_reproduced(K64):
    fl, fr, T_rl = scene(K64)
    truth = fl.true_depth.grid
    out = predict(fl.image, sparse_from_truth(truth, 1.0), PredictionContext(K64, neighbors=[(fr.image, T_rl)],
                                                                              opts=RefineOptions(max_iters=50)))
    assert np.max(np.abs(out.grid - truth)) < 0.02


def test_rmse_non_increasing_with_density(K64):
    fl, fr, T_rl = scene(K64, seed=3)
    truth = fl.true_depth.grid
    errs = []
    for d in (0.0, 0.3, 1.0):
        sp = sparse_from_truth(truth, d, seed=1) if d else None
        ctx = PredictionContext(K64, altitude_prior=12.0, neighbors=[(fr.image, T_rl)],
                                opts=RefineOptions(max_iters=60))
        errs.append(compute_metrics(predict(fl.image, sp, ctx), fl.true_depth).rmse)
    assert errs[0] >= errs[1] >= errs[2]


def test_predict_needs_input(K64):
    with pytest.raises(NoInputError):
        predict(None, None, PredictionContext(K64))
    with pytest.raises(NoInputError):
        predict(np.zeros((64, 64)), SparseDepth.empty((64, 64)), PredictionContext(K64))


def test_custom_predictor_is_dispatched(K64):
    calls = []

    def fixed(image, sparse, context):
        calls.append(sparse)
        return DepthMap.constant(context.K.shape, 3.0)

    out = predict(np.zeros((64, 64)), SparseDepth.empty((64, 64)), PredictionContext(K64), fixed)
    assert calls == [None] and np.all(out.grid == 3.0)


# -- dynamic completion ---------------------------------------------------------


def stream(fl, fr, T_rl, K, ctx, n_packets=10, per_packet=300, seed=0):
    rng = np.random.default_rng(seed)
    yield StereoFrame(fl.image, fr.image, T_rl, ctx, 0.0)
    for k in range(1, n_packets + 1):
        r = rng.integers(0, K.height, per_packet)
        c = rng.integers(0, K.width, per_packet)
        pts = backproject(np.column_stack([c, r]).astype(float), fl.true_depth.grid[r, c], K)
        yield LidarPacket(0.1 * k, np.full(per_packet, 0.1 * k), pts)


def test_easy_scene_accepts_without_lidar(K64):
    fl, fr, T_rl = scene(K64)
    ctx = PredictionContext(K64, altitude_prior=10.0, neighbors=[(fr.image, T_rl)],
                            opts=RefineOptions(max_iters=30))
    res = dynamic_completion(stream(fl, fr, T_rl, K64, ctx), AccumulationBuffer())
    assert res.accepted and res.accumulation_time < 0.1


def test_textureless_scene_falls_back_at_deadline(K64):
    fl, fr, T_rl = scene(K64, texture="flat")
    ctx = PredictionContext(K64, altitude_prior=12.0, neighbors=[(fr.image, T_rl)],
                            opts=RefineOptions(max_iters=10))
    res = dynamic_completion(stream(fl, fr, T_rl, K64, ctx), AccumulationBuffer(), deadline=1.0)
    assert not res.accepted
    assert res.accumulation_time == pytest.approx(1.0)
    assert np.array_equal(res.depth.grid, nn_interpolate(res.sparse).grid)
    assert len(res.evaluations) == 11


def test_zero_deadline_falls_back_immediately(K64):
    fl, fr, T_rl = scene(K64)
    ctx = PredictionContext(K64, altitude_prior=10.0, neighbors=[(fr.image, T_rl)])
    calls = []

    def evaluator(*a, **kw):
        calls.append(1)
        return evaluate_prediction(*a, **kw)

    res = dynamic_completion(stream(fl, fr, T_rl, K64, ctx), AccumulationBuffer(), evaluator, deadline=0.0)
    assert not res.accepted and not calls
    assert res.accumulation_time == pytest.approx(0.1)


def test_rejecting_evaluator_uses_full_buffer(K64):
    fl, fr, T_rl = scene(K64)
    ctx = PredictionContext(K64, altitude_prior=10.0, neighbors=[(fr.image, T_rl)],
                            opts=RefineOptions(max_iters=5))
    reject = lambda *a, **kw: EvalResult(0.5, 0.5, 0.5, False)  # noqa: E731
    buf = AccumulationBuffer()
    res = dynamic_completion(stream(fl, fr, T_rl, K64, ctx, n_packets=15), buf, reject, deadline=0.5)
    assert res.accumulation_time == pytest.approx(0.5)
    assert len(buf) == 5 * 300


def test_empty_stream():
    with pytest.raises(StreamExhaustedError):
        dynamic_completion(iter([]), AccumulationBuffer())


# -- metrics --------------------------------------------------------------------


def test_metrics_cases():
    gt = DepthMap(np.full((4, 4), 10.0))
    m = compute_metrics(gt.copy(), gt)
    assert (m.rmse, m.rel, m.delta) == (0.0, 0.0, 1.0)
    m = compute_metrics(DepthMap(gt.grid + 1.0), gt)
    assert m.rmse == pytest.approx(1000.0)
    with pytest.raises(EmptyInputError):
        compute_metrics(gt, SparseDepth.empty((4, 4)))


def test_metrics_match_brute_force(rng):
    for _ in range(10):
        p = rng.uniform(1, 20, (9, 7))
        g = rng.uniform(1, 20, (9, 7))
        g[rng.random((9, 7)) < 0.3] = np.nan
        m = compute_metrics(DepthMap(p), SparseDepth(g))
        pairs = [(p[i, j], g[i, j]) for i in range(9) for j in range(7) if np.isfinite(g[i, j])]
        se = sum((a - b) ** 2 for a, b in pairs) / len(pairs)
        rel = sum(abs(a - b) / b for a, b in pairs) / len(pairs)
        dl = sum(max(a / b, b / a) < 1.25 for a, b in pairs) / len(pairs)
        assert abs(m.rmse - 1000 * se**0.5) < 1e-9
        assert abs(m.rel - 1000 * rel) < 1e-9
        assert abs(m.delta - dl) < 1e-12
        assert m.count == len(pairs)
