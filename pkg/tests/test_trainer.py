import math

import numpy as np
import pytest
from scipy import stats

from diffseg.denoiser import DenoiserConfig, forward
from diffseg.discrete import ce_loss, q_probs
from diffseg.grids import to_one_hot
from diffseg.rng import STREAM_TRAIN, stream
from diffseg.trainer import (
    Batch,
    PriorData,
    TrainConfig,
    TrainingDivergedError,
    compute_loss_and_grads,
    first_prediction,
    lr_at,
    new_state,
    prepare_inputs,
    run_stage,
    run_two_stage,
    sample_batch,
    train_step,
)
from helpers import copy_weights

CFG = DenoiserConfig(num_classes=4, feature_channels=8, base_channels=8, depth=1, embed_dim=4, time_dim=8, cond_dropout=0.1)
TC = TrainConfig(T=6, stage1_iters=4, stage2_iters=6, batch_size=4, lr=1e-3, lr_interval=3, log_interval=2)


def make_data(n=12, size=8, seed=0):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, 4, (n, size, size))
    init = np.where(rng.random(gt.shape) < 0.8, gt, rng.integers(0, 4, gt.shape))
    feats = np.concatenate([to_one_hot(init, 4), rng.normal(size=gt.shape + (4,))], axis=-1).astype(np.float32)
    return PriorData(feats, gt, init)


def test_lr_schedule_examples():
    assert lr_at(0) == 1.5e-4
    assert lr_at(20000) == 7.5e-5
    assert lr_at(19999) == 1.5e-4
    assert lr_at(10**9) == 1e-6
    assert lr_at(3, 1.0, 1, 0.1) == 0.125
    assert lr_at(4, 1.0, 1, 0.1) == 0.1
    with pytest.raises(ValueError):
        lr_at(-1)


def test_config_validation():
    for bad in ({"T": 0}, {"target": "x"}, {"loss": "mse"}, {"lr": 1e-7}, {"transition": "warp"}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_first_prediction_deterministic_and_mask_free():
    state = new_state(CFG, TC)
    feats = make_data().features[:2]
    for kind in ("replace", "mask", "hybrid"):
        sched = TrainConfig(T=6, transition=kind).noise_schedule()
        a = first_prediction(state.params, CFG, feats, sched, np.random.default_rng(1))
        b = first_prediction(state.params, CFG, feats, sched, np.random.default_rng(1))
        assert np.array_equal(a, b) and a.min() >= 0 and a.max() < 4


def test_first_prediction_copies_feature_channel():
    params = copy_weights(CFG)
    data = make_data()
    for seed in range(3):
        pred = first_prediction(params, CFG, data.features, TC.noise_schedule(), np.random.default_rng(seed))
        assert np.array_equal(pred, data.init)


def test_copy_weights_also_work_for_two_levels():
    cfg = DenoiserConfig(feature_channels=8)
    params = copy_weights(cfg)
    data = make_data()
    pred = first_prediction(params, cfg, data.features, TC.noise_schedule(), np.random.default_rng(0))
    assert np.array_equal(pred, data.init)


def test_seeded_runs_have_identical_losses():
    data = make_data()
    a = run_two_stage(data, CFG, TC)
    b = run_two_stage(data, CFG, TC)
    assert a.losses == b.losses and len(a.losses) == 10
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])


def test_two_stage_is_stage_one_then_stage_two():
    data = make_data()
    whole = run_two_stage(data, CFG, TC)
    s = new_state(CFG, TC)
    run_stage(s, data, TC, "single", TC.stage1_iters)
    snapshot = {k: v.copy() for k, v in s.params.items()}
    resumed = s.copy()
    for k in snapshot:
        assert np.array_equal(resumed.params[k], snapshot[k])
    run_stage(resumed, data, TC, "multi", TC.stage2_iters)
    assert resumed.losses == whole.losses and resumed.iteration == 10


def test_lr_restarts_each_stage():
    lines = []
    run_two_stage(make_data(), CFG, TC, lines.append)
    rows = [line.split("\t") for line in lines]
    assert [int(r[0]) for r in rows] == [2, 4, 6, 8, 10]
    assert all(len(r) == 3 for r in rows)
    # stage 1: iterations 1..4 -> lr index 1 and 3; stage 2 restarts at 1e-3
    assert [float(r[1]) for r in rows] == [1e-3, 5e-4, 1e-3, 5e-4, 5e-4]


def test_ema_differs_from_live_after_training():
    state = run_two_stage(make_data(), CFG, TrainConfig(**{**TC.to_dict(), "ema_interval": 1}))
    assert any(not np.array_equal(state.ema.shadow[k], state.params[k]) for k in state.params)


def test_ce_loss_matches_recomputation():
    state = new_state(CFG, TC)
    data = make_data()
    sched = TC.noise_schedule()
    batch = sample_batch(data, TC, "multi", 0)
    feats, t, x_t = prepare_inputs(state, batch, TC, sched, "multi", np.random.default_rng(0))
    loss, _, logits = compute_loss_and_grads(state.params, CFG, x_t, feats, t, batch.gt, "ce", sched)
    independent = ce_loss(forward(state.params, CFG, x_t, feats, t), batch.gt)
    assert loss == pytest.approx(independent, rel=1e-6)
    assert np.array_equal(logits, forward(state.params, CFG, x_t, feats, t))


def test_ce_loss_bounds():
    data = make_data()
    sched = TC.noise_schedule()
    for seed in range(5):
        state = new_state(CFG, TrainConfig(seed=seed))
        batch = sample_batch(data, TC, "multi", seed)
        feats, t, x_t = prepare_inputs(state, batch, TC, sched, "multi", np.random.default_rng(seed))
        loss, _, logits = compute_loss_and_grads(state.params, CFG, x_t, feats, t, batch.gt, "ce", sched)
        spread = float((logits.max(-1) - logits.min(-1)).max())
        assert 0.0 <= loss <= math.log(4) + spread


@pytest.mark.parametrize("loss", ["vlb", "hybrid"])
def test_other_losses_run(loss):
    tc = TrainConfig(**{**TC.to_dict(), "loss": loss})
    state = run_two_stage(make_data(), CFG, tc)
    assert all(math.isfinite(v) and v >= 0 for v in state.losses)


def test_first_prediction_pass_carries_no_gradient():
    # the update from train_step equals one computed on the cached noised batch
    data = make_data()
    tc = TrainConfig(**{**TC.to_dict(), "target": "first"})
    sched = tc.noise_schedule()
    state = new_state(CFG, tc)
    run_stage(state, data, tc, "single", 2)
    state.stage = "multi"
    state.stage_iteration = 0
    cached = state.copy()
    batch = sample_batch(data, tc, "multi", 0)
    rng = stream(tc.seed, STREAM_TRAIN, 1, 0, 1)  # stage "multi", step 0, noise draw
    feats, t, x_t = prepare_inputs(cached, batch, tc, sched, "multi", rng)
    _, grads, _ = compute_loss_and_grads(cached.params, CFG, x_t, feats, t, batch.gt, "ce", sched)
    cached.opt.step(cached.params, grads, lr_at(0, tc.lr, tc.lr_interval, tc.lr_floor))
    train_step(state, batch, tc, sched, "multi")
    for k in state.params:
        assert np.array_equal(state.params[k], cached.params[k])


def test_first_target_at_max_noise_is_uniform():
    # with T = 1 every sampled timestep is T; the noised input ignores what was predicted
    tc = TrainConfig(T=1, target="first", batch_size=4)
    sched = tc.noise_schedule()
    cfg = DenoiserConfig(num_classes=4, feature_channels=8, base_channels=8, depth=1, embed_dim=4, time_dim=8)
    state = new_state(cfg, tc)
    state.params = copy_weights(cfg)  # first prediction = feature argmax, far from uniform
    data = make_data(n=4)
    batch = Batch(data.features, data.gt, data.init)
    counts = np.zeros(4)
    for seed in range(100):
        _, t, x_t = prepare_inputs(state, batch, tc, sched, "multi", np.random.default_rng(seed))
        assert np.all(t == 1)
        counts += np.bincount(x_t.ravel(), minlength=5)[:4]
    assert stats.chisquare(counts).pvalue > 0.001


def test_gt_target_marginal_matches_q():
    tc = TrainConfig(T=4, target="gt", batch_size=8)
    sched = tc.noise_schedule()
    cfg = DenoiserConfig(num_classes=4, feature_channels=8, base_channels=8, depth=1, embed_dim=4, time_dim=8)
    state = new_state(cfg, tc)
    data = make_data(n=8)
    batch = Batch(data.features, data.gt, data.init)
    counts = np.zeros((tc.T + 1, 4, 5))
    for seed in range(150):
        _, t, x_t = prepare_inputs(state, batch, tc, sched, "multi", np.random.default_rng(seed))
        tt = np.broadcast_to(t[:, None, None], x_t.shape)
        np.add.at(counts, (tt.ravel(), batch.gt.ravel(), x_t.ravel()), 1)
    for t in range(1, tc.T + 1):
        for x0 in range(4):
            n = counts[t, x0].sum()
            p = q_probs(np.array([x0]), t, sched, 4)[0]
            p = np.pad(p, (0, 5 - p.size))  # replace-only rows carry no MASK column
            sigma = np.sqrt(n * p * (1 - p))
            assert np.all(np.abs(counts[t, x0] - n * p) <= 3 * sigma + 1e-9), (t, x0)


def test_condition_dropout_zeroes_whole_samples():
    state = new_state(CFG, TC)
    batch = Batch(*(a[:8] for a in (make_data().features, make_data().gt, make_data().init)))
    dropped = 0
    for seed in range(30):
        feats, _, _ = prepare_inputs(state, batch, TC, TC.noise_schedule(), "single", np.random.default_rng(seed))
        zero = ~feats.reshape(8, -1).any(axis=1)
        kept = np.all(feats.reshape(8, -1) == batch.features.reshape(8, -1), axis=1)
        assert np.all(zero | kept)
        dropped += zero.sum()
    assert 0 < dropped < 240 * 0.3


def test_single_stage_uses_max_noise_and_gt():
    state = new_state(CFG, TC)
    batch = sample_batch(make_data(), TC, "single", 0)
    _, t, _ = prepare_inputs(state, batch, TC, TC.noise_schedule(), "single", np.random.default_rng(0))
    assert np.all(t == TC.T)


def test_non_finite_loss_aborts():
    state = new_state(CFG, TC)
    state.params["head.b"][:] = np.nan
    with pytest.raises(TrainingDivergedError):
        train_step(state, sample_batch(make_data(), TC, "single", 0), TC, TC.noise_schedule(), "single")


def test_empty_data_rejected():
    empty = PriorData(np.zeros((0, 8, 8, 8), np.float32), np.zeros((0, 8, 8), int), np.zeros((0, 8, 8), int))
    with pytest.raises(ValueError):
        run_stage(new_state(CFG, TC), empty, TC, "single", 1)
