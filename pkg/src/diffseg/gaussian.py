"""Gaussian diffusion and the analog-bits codec."""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

from .grids import LabelGrid


@dataclass(frozen=True, eq=False)
class GaussianSchedule:
    betas: np.ndarray  # (T+1,), betas[0] == 0
    alphas: np.ndarray
    alpha_bar: np.ndarray  # alpha_bar[0] == 1

    @property
    def T(self) -> int:
        return len(self.betas) - 1

    @classmethod
    def from_betas(cls, betas) -> "GaussianSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) < 1:
            raise ValueError("need a 1-d array of per-step betas")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("betas must lie strictly inside (0, 1)")
        full = np.concatenate([[0.0], betas])
        alphas = 1.0 - full
        return cls(full, alphas, np.cumprod(alphas))


def linear_gaussian_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> GaussianSchedule:
    """DDPM linear betas, rescaled so T steps carry the noise of 1000."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    scale = 1000.0 / T
    betas = np.linspace(beta_start * scale, beta_end * scale, T)
    return GaussianSchedule.from_betas(np.clip(betas, 1e-8, 0.999))


def num_bits(num_classes: int) -> int:
    return max(1, math.ceil(math.log2(num_classes)))


def bit_encode(labels: LabelGrid, num_classes: int, scale: float = 0.1) -> np.ndarray:
    """Binary expansion, most significant bit first, mapped {0, 1} -> {-scale, +scale}."""
    labels = np.asarray(labels)
    n = num_bits(num_classes)
    if labels.size and (labels.min() < 0 or labels.max() >= 2**n or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes}) and fit in {n} bits")
    shifts = np.arange(n - 1, -1, -1)
    bits = (labels[..., None] >> shifts) & 1
    return np.where(bits == 1, scale, -scale).astype(np.float64)


def bit_decode(analog: np.ndarray, num_classes: int) -> LabelGrid:
    """Threshold at 0 (strictly positive means 1) and reassemble; overflow clamps to K-1."""
    analog = np.asarray(analog)
    n = analog.shape[-1]
    weights = 1 << np.arange(n - 1, -1, -1)
    value = ((analog > 0).astype(np.int64) * weights).sum(axis=-1)
    return np.minimum(value, num_classes - 1)


def gaussian_q_sample(x0: np.ndarray, t: int, schedule: GaussianSchedule, eps: np.ndarray) -> np.ndarray:
    """``sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps``."""
    ab = schedule.alpha_bar[int(t)]
    return math.sqrt(ab) * np.asarray(x0) + math.sqrt(1.0 - ab) * np.asarray(eps)


@dataclass(frozen=True)
class GaussianPosterior:
    mean: np.ndarray
    variance: float


def gaussian_posterior(x_t: np.ndarray, x0: np.ndarray, t: int, schedule: GaussianSchedule) -> GaussianPosterior:
    t = int(t)
    if not 1 <= t <= schedule.T:
        raise ValueError(f"timestep {t} outside [1, {schedule.T}]")
    beta = schedule.betas[t]
    ab, ab_prev = schedule.alpha_bar[t], schedule.alpha_bar[t - 1]
    c0 = math.sqrt(ab_prev) * beta / (1.0 - ab)
    ct = math.sqrt(schedule.alphas[t]) * (1.0 - ab_prev) / (1.0 - ab)
    mean = c0 * np.asarray(x0) + ct * np.asarray(x_t)
    return GaussianPosterior(mean, float((1.0 - ab_prev) / (1.0 - ab) * beta))


def l_simple(eps_pred: np.ndarray, eps: np.ndarray) -> float:
    eps_pred = np.asarray(eps_pred)
    eps = np.asarray(eps)
    if eps_pred.shape != eps.shape:
        raise ValueError(f"shape mismatch {eps_pred.shape} vs {eps.shape}")
    return float(np.mean((eps - eps_pred) ** 2))
