"""Training the denoiser on noised masks.

Each step picks the object to corrupt (ground truth, the base
segmentor's argmax, or the model's own single-step prediction from pure
noise), noises it to a random timestep and fits the clean ground truth.
Training runs in two stages: first only the maximal-noise step, then
all steps, each stage with its own halving learning-rate schedule.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
import logging
import math
from typing import Callable

import numpy as np

from . import nn
from .denoiser import DenoiserConfig, EmaState, Params, ema_update, forward, init_params
from .discrete import NoiseSchedule, TransitionKind, build_schedule, ce_loss_and_grad, q_sample, stationary_sample, vlb_loss_and_grad
from .grids import argmax_labels
from .rng import STREAM_INIT, STREAM_TRAIN, stream

log = logging.getLogger(__name__)

TARGETS = ("gt", "init", "first")
LOSSES = ("ce", "vlb", "hybrid")
STAGES = ("single", "multi")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    T: int = 20
    transition: str = "replace"
    replace_fraction: float = 0.5
    schedule: str = "linear"
    target: str = "first"
    loss: str = "ce"
    stage1_iters: int = 2000
    stage2_iters: int = 6000
    batch_size: int = 8
    lr: float = 1.5e-4
    lr_interval: int = 1000
    lr_floor: float = 1e-6
    ema_decay: float = 0.99
    ema_interval: int = 25
    flip: bool = True
    seed: int = 0
    log_interval: int = 100

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if not 0 < self.lr_floor <= self.lr:
            raise ValueError("need 0 < lr_floor <= lr")
        if self.lr_interval < 1 or self.batch_size < 1:
            raise ValueError("lr_interval and batch_size must be >= 1")
        TransitionKind.parse(self.transition, self.replace_fraction)

    def noise_schedule(self) -> NoiseSchedule:
        return build_schedule(self.schedule, self.T, TransitionKind.parse(self.transition, self.replace_fraction))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PriorData:
    """Quarter-scale training material: base features, ground truth and base argmax."""

    features: np.ndarray  # (N, h, w, C) float32
    gt: np.ndarray  # (N, h, w)
    init: np.ndarray  # (N, h, w)

    def __len__(self) -> int:
        return len(self.gt)


@dataclass
class Batch:
    features: np.ndarray
    gt: np.ndarray
    init: np.ndarray


@dataclass
class TrainState:
    cfg: DenoiserConfig
    params: Params
    ema: EmaState
    opt: nn.Adam
    iteration: int = 0
    stage_iteration: int = 0
    stage: str = "single"
    losses: list = field(default_factory=list)

    def copy(self) -> "TrainState":
        opt = nn.Adam.__new__(nn.Adam)
        opt.__dict__.update(self.opt.__dict__)
        opt.m = {k: v.copy() for k, v in self.opt.m.items()}
        opt.v = {k: v.copy() for k, v in self.opt.v.items()}
        ema = EmaState({k: v.copy() for k, v in self.ema.shadow.items()}, self.ema.decay, self.ema.update_interval, self.ema.calls)
        params = {k: v.copy() for k, v in self.params.items()}
        return replace(self, params=params, ema=ema, opt=opt, losses=list(self.losses))


def new_state(cfg: DenoiserConfig, tcfg: TrainConfig) -> TrainState:
    params = init_params(cfg, stream(tcfg.seed, STREAM_INIT))
    return TrainState(cfg, params, EmaState.create(params, tcfg.ema_decay, tcfg.ema_interval), nn.Adam(params))


def lr_at(iteration: int, lr: float = 1.5e-4, interval: int = 20000, floor: float = 1e-6) -> float:
    """``lr * 2**-(iteration // interval)``, never below ``floor``."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    halvings = iteration // interval
    if halvings > 1100:  # 2**-1100 underflows; the floor applies anyway
        return floor
    return max(lr * 2.0 ** (-halvings), floor)


def first_prediction(params: Params, cfg: DenoiserConfig, features, schedule: NoiseSchedule, rng: np.random.Generator):
    """Argmax of a single denoise at ``t = T`` from a random starting mask; no gradients are kept."""
    features = np.asarray(features)
    x_T = stationary_sample(features.shape[:-1], schedule, cfg.num_classes, rng)
    return argmax_labels(forward(params, cfg, x_T, features, schedule.T))


def compute_loss_and_grads(params: Params, cfg: DenoiserConfig, x_t, features, t, gt, loss: str, schedule: NoiseSchedule):
    """Loss of the clean-label prediction for already-noised inputs, and parameter gradients."""
    logits, back = forward(params, cfg, x_t, features, t, need_grad=True)
    if loss == "ce":
        value, dl = ce_loss_and_grad(logits, gt)
    elif loss == "vlb":
        value, dl = vlb_loss_and_grad(logits, x_t, gt, t, schedule, cfg.num_classes)
    else:
        v1, d1 = vlb_loss_and_grad(logits, x_t, gt, t, schedule, cfg.num_classes)
        v2, d2 = ce_loss_and_grad(logits, gt)
        value, dl = v1 + v2, d1 + d2
    return value, back(dl), logits


def prepare_inputs(state: TrainState, batch: Batch, tcfg: TrainConfig, schedule: NoiseSchedule, stage: str, rng: np.random.Generator):
    """Condition dropout, timesteps and the noised object for one step: ``(features, t, x_t)``."""
    B = len(batch.gt)
    feats = batch.features
    if state.cfg.cond_dropout > 0:
        drop = rng.random(B) < state.cfg.cond_dropout
        feats = np.where(drop[:, None, None, None], 0.0, feats).astype(feats.dtype)
    if stage == "single":
        t = np.full(B, schedule.T, dtype=np.int64)
        x0 = batch.gt
    else:
        t = rng.integers(1, schedule.T + 1, size=B)
        if tcfg.target == "gt":
            x0 = batch.gt
        elif tcfg.target == "init":
            x0 = batch.init
        else:
            x0 = first_prediction(state.params, state.cfg, feats, schedule, rng)
    x_t = q_sample(x0, t, schedule, state.cfg.num_classes, rng)
    return feats, t, x_t


def train_step(state: TrainState, batch: Batch, tcfg: TrainConfig, schedule: NoiseSchedule, stage: str | None = None) -> tuple[TrainState, float]:
    stage = stage or state.stage
    rng = stream(tcfg.seed, STREAM_TRAIN, STAGES.index(stage), state.stage_iteration, 1)
    feats, t, x_t = prepare_inputs(state, batch, tcfg, schedule, stage, rng)
    loss, grads, _ = compute_loss_and_grads(state.params, state.cfg, x_t, feats, t, batch.gt, tcfg.loss, schedule)
    if not math.isfinite(loss):
        raise TrainingDivergedError(f"loss became {loss} at iteration {state.iteration}")
    state.opt.step(state.params, grads, lr_at(state.stage_iteration, tcfg.lr, tcfg.lr_interval, tcfg.lr_floor))
    ema_update(state.ema, state.params)
    state.iteration += 1
    state.stage_iteration += 1
    state.losses.append(loss)
    return state, loss


def sample_batch(data: PriorData, tcfg: TrainConfig, stage: str, step: int) -> Batch:
    rng = stream(tcfg.seed, STREAM_TRAIN, STAGES.index(stage), step, 0)
    idx = rng.integers(0, len(data), tcfg.batch_size)
    f, g, i = data.features[idx], data.gt[idx], data.init[idx]
    if tcfg.flip:
        flip = rng.random(tcfg.batch_size) < 0.5
        f = np.where(flip[:, None, None, None], f[:, :, ::-1], f)
        g = np.where(flip[:, None, None], g[:, :, ::-1], g)
        i = np.where(flip[:, None, None], i[:, :, ::-1], i)
    return Batch(f, g, i)


LogFn = Callable[[str], None]


def run_stage(state: TrainState, data: PriorData, tcfg: TrainConfig, stage: str, iters: int, log_fn: LogFn | None = None, eval_fn=None) -> TrainState:
    """Train one stage; the learning-rate schedule restarts at the stage boundary."""
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}")
    if len(data) == 0:
        raise ValueError("training set is empty")
    schedule = tcfg.noise_schedule()
    state.stage = stage
    state.stage_iteration = 0
    window: list[float] = []
    for _ in range(iters):
        batch = sample_batch(data, tcfg, stage, state.stage_iteration)
        lr = lr_at(state.stage_iteration, tcfg.lr, tcfg.lr_interval, tcfg.lr_floor)
        _, loss = train_step(state, batch, tcfg, schedule, stage)
        window.append(loss)
        if state.iteration % tcfg.log_interval == 0:
            line = f"{state.iteration}\t{lr:.6g}\t{np.mean(window):.6f}"
            if eval_fn is not None:
                line += f"\t{eval_fn(state):.6f}"
            window = []
            log.info("%s %s", stage, line.replace("\t", " "))
            if log_fn is not None:
                log_fn(line)
    return state


def run_two_stage(data: PriorData, cfg: DenoiserConfig, tcfg: TrainConfig, log_fn: LogFn | None = None) -> TrainState:
    state = new_state(cfg, tcfg)
    run_stage(state, data, tcfg, "single", tcfg.stage1_iters, log_fn)
    run_stage(state, data, tcfg, "multi", tcfg.stage2_iters, log_fn)
    return state
