"""Iterative mask refinement by repeated denoise and re-noise.

Starting from a random mask at ``t = T``, every step predicts clean
logits, takes their argmax, and re-noises that prediction to the next
timestep of a strided schedule.  Re-noising either ignores the current
state (``free``: sample ``q(x_next | x0_pred)``) or samples the exact
posterior ``q(x_next | x_t, x0_pred)`` (``posterior``).  The last step
emits the prediction itself.  With a guidance scale ``s > 0`` the logits
are ``(s + 1) l_cond - s l_uncond``, where the unconditional branch is
the same network fed all-zero features.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
import json
from pathlib import Path

import numpy as np

from .denoiser import DenoiserConfig, Params, forward
from .discrete import NoiseSchedule, free_renoise, posterior, sample_categorical, stationary_sample
from .grids import argmax_labels, decode_full
from .synthdata import save_labels

STRATEGIES = ("free", "posterior")


class RefineConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RefineConfig:
    steps: int = 20
    guidance: float = 0.0
    strategy: str = "free"
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise RefineConfigError("steps must be >= 1")
        if self.guidance < 0:
            raise RefineConfigError("guidance scale must be >= 0")
        if self.strategy not in STRATEGIES:
            raise RefineConfigError(f"strategy must be one of {STRATEGIES}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TrajectoryStep:
    t: int
    x0_pred: np.ndarray
    x_t: np.ndarray


@dataclass
class RefineResult:
    trajectory: list[TrajectoryStep]
    logits: np.ndarray  # last quarter-scale logits
    labels: np.ndarray  # decoded full-resolution labels


def stride_schedule(T: int, n: int) -> list[int]:
    """``n`` timesteps ``T, T - d, ..., T - (n-1) d`` with ``d = T // n``."""
    if not 1 <= n <= T:
        raise RefineConfigError(f"need 1 <= n <= T, got n={n}, T={T}")
    d = T // n
    return [T - i * d for i in range(n)]


def cfg_combine(l_c: np.ndarray, l_u: np.ndarray, s: float) -> np.ndarray:
    """``(s + 1) l_c - s l_u``, written so that equal inputs or ``s = 0`` give ``l_c`` exactly."""
    l_c = np.asarray(l_c)
    l_u = np.asarray(l_u)
    if l_c.shape != l_u.shape:
        raise ValueError(f"conditional {l_c.shape} and unconditional {l_u.shape} logits differ in shape")
    if s == 0:
        return l_c.copy()
    return l_c + s * (l_c - l_u)


def posterior_renoise(x_t, x0_pred, t: int, t_next: int, schedule: NoiseSchedule, num_classes: int, rng: np.random.Generator):
    """Sample ``q(x_{t_next} | x_t, x0_pred)``; strides use the composite transition."""
    probs = posterior(x_t, x0_pred, t, schedule, num_classes, t_prev=t_next)
    return sample_categorical(probs, rng)


def predict_logits(params: Params, cfg: DenoiserConfig, x_t, features, t: int, guidance: float = 0.0) -> np.ndarray:
    l_c = forward(params, cfg, x_t, features, t)
    if guidance == 0:
        return l_c
    if cfg.cond_dropout <= 0:
        raise RefineConfigError("guidance needs a model trained with condition dropout (no unconditional branch)")
    l_u = forward(params, cfg, x_t, np.zeros_like(features), t)
    return cfg_combine(l_c, l_u, guidance)


def _per_sample(fn, rngs, *arrays):
    return np.stack([fn(*(a[i] for a in arrays), rng) for i, rng in enumerate(rngs)])


def refine(
    features: np.ndarray,
    params: Params,
    cfg: DenoiserConfig,
    schedule: NoiseSchedule,
    rcfg: RefineConfig,
    rng: np.random.Generator | list[np.random.Generator],
    full_size: tuple[int, int] | None = None,
) -> RefineResult | list[RefineResult]:
    """Refine one ``(h, w, C)`` feature grid, or a batch with one generator per sample."""
    features = np.asarray(features)
    single = features.ndim == 3
    if single:
        features = features[None]
        rng = [rng]
    if len(rng) != len(features):
        raise ValueError("need one generator per sample")
    if rcfg.guidance > 0 and cfg.cond_dropout <= 0:
        raise RefineConfigError("guidance needs a model trained with condition dropout (no unconditional branch)")
    K = cfg.num_classes
    B, h, w = features.shape[:3]
    ts = stride_schedule(schedule.T, rcfg.steps)
    x = np.stack([stationary_sample((h, w), schedule, K, r) for r in rng])
    steps: list[list[TrajectoryStep]] = [[] for _ in range(B)]
    for i, t in enumerate(ts):
        logits = predict_logits(params, cfg, x, features, t, rcfg.guidance)
        x0 = argmax_labels(logits)
        t_next = ts[i + 1] if i + 1 < len(ts) else 0
        if t_next == 0:
            nxt = x0
        elif rcfg.strategy == "free":
            nxt = _per_sample(lambda a, r: free_renoise(a, t_next, schedule, K, r), rng, x0)
        else:
            nxt = _per_sample(lambda a, b, r: posterior_renoise(a, b, t, t_next, schedule, K, r), rng, x, x0)
        for b in range(B):
            steps[b].append(TrajectoryStep(t, x0[b], x[b]))
        x = nxt
    H, W = full_size or (4 * h, 4 * w)
    results = []
    for b in range(B):
        steps[b].append(TrajectoryStep(0, x[b], x[b]))
        results.append(RefineResult(steps[b], logits[b], decode_full(logits[b], H, W)))
    return results[0] if single else results


def dump_trajectory(result: RefineResult, out_dir, num_classes: int) -> Path:
    """One PGM of the prediction per step plus ``index.jsonl`` with ``step, timestep, file``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, st in enumerate(result.trajectory):
        name = f"step{i:03d}_t{st.t:04d}.pgm"
        save_labels(st.x0_pred, out_dir / name, num_classes)
        lines.append(json.dumps({"step": i, "timestep": st.t, "file": name}) + "\n")
    index = out_dir / "index.jsonl"
    index.write_text("".join(lines), encoding="utf-8")
    return index
