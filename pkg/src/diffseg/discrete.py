"""Categorical diffusion over label grids.

Forward corruption follows ``q(x_t | x_{t-1}) = Cat(x_{t-1} Q_t)`` with
row-stochastic one-step matrices ``Q_t`` and cumulative products
``Qbar_t = Q_1 Q_2 ... Q_t``.  A schedule fixes the cumulative keep
probability ``alpha_bar_t``; the per-step corruption budget
``c_t = 1 - alpha_bar_t / alpha_bar_{t-1}`` is split between uniform
replacement (``beta_t``) and the absorbing MASK token (``gamma_t``)
according to the transition kind.

The MASK token, when present, is state ``K`` so matrices are
``(K+1) x (K+1)``; replace-only processes use plain ``K x K`` matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grids import LabelGrid, LogitsGrid, log_softmax, softmax

_LOG_FLOOR = 1e-30


class ImpossibleStateError(ValueError):
    """A (x_t, x_0, t) triple with q(x_t | x_0) = 0 was given to the posterior."""


@dataclass(frozen=True)
class TransitionKind:
    """Share of the corruption budget that goes to uniform replacement.

    ``1.0`` is replace-only (uniform transition), ``0.0`` mask-only
    (absorbing), anything in between mixes the two.
    """

    replace_fraction: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.replace_fraction <= 1.0:
            raise ValueError(f"replace_fraction must be in [0, 1], got {self.replace_fraction}")

    @property
    def uses_mask(self) -> bool:
        return self.replace_fraction < 1.0

    @property
    def name(self) -> str:
        if self.replace_fraction == 1.0:
            return "replace"
        if self.replace_fraction == 0.0:
            return "mask"
        return "hybrid"

    def num_states(self, num_classes: int) -> int:
        return num_classes + 1 if self.uses_mask else num_classes

    @classmethod
    def parse(cls, text: str, replace_fraction: float = 0.5) -> "TransitionKind":
        text = text.strip().lower()
        if text in ("replace", "replace_only", "uniform"):
            return REPLACE_ONLY
        if text in ("mask", "mask_only", "absorbing"):
            return MASK_ONLY
        if text in ("hybrid", "replace_mask", "replace+mask"):
            return cls(replace_fraction)
        raise ValueError(f"unknown transition kind {text!r}")


REPLACE_ONLY = TransitionKind(1.0)
MASK_ONLY = TransitionKind(0.0)


def replace_mask(fraction: float = 0.5) -> TransitionKind:
    return TransitionKind(fraction)


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    kind: str
    T: int
    transition: TransitionKind
    alpha_bar: np.ndarray  # (T+1,), alpha_bar[0] == 1
    corruption: np.ndarray  # (T+1,), corruption[0] == 0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def betas(self) -> np.ndarray:
        return self.transition.replace_fraction * self.corruption

    @property
    def gammas(self) -> np.ndarray:
        return (1.0 - self.transition.replace_fraction) * self.corruption


def build_schedule(kind: str = "linear", T: int = 20, transition: TransitionKind = REPLACE_ONLY) -> NoiseSchedule:
    """Schedule on the cumulative keep probability.

    ``linear``: ``alpha_bar_t = 1 - t/T``.  ``cosine``: the squared-cosine
    form with offset 0.008, normalised so ``alpha_bar_0 = 1`` and pinned to
    0 at ``t = T``.
    """
    T = int(T)
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    t = np.arange(T + 1, dtype=np.float64)
    if kind == "linear":
        alpha_bar = 1.0 - t / T
    elif kind == "cosine":
        s = 0.008
        f = np.cos((t / T + s) / (1 + s) * np.pi / 2) ** 2
        alpha_bar = f / f[0]
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alpha_bar[0] = 1.0
    alpha_bar[T] = 0.0
    corruption = np.zeros(T + 1)
    corruption[1:] = 1.0 - alpha_bar[1:] / alpha_bar[:-1]
    return NoiseSchedule(kind, T, transition, alpha_bar, np.clip(corruption, 0.0, 1.0))


def _check_t(schedule: NoiseSchedule, t: int, lo: int) -> int:
    t = int(t)
    if not lo <= t <= schedule.T:
        raise ValueError(f"timestep {t} outside [{lo}, {schedule.T}]")
    return t


def transition_matrix(schedule: NoiseSchedule, t: int, num_classes: int) -> np.ndarray:
    """One-step matrix ``Q_t`` (rows: x_{t-1}, columns: x_t)."""
    t = _check_t(schedule, t, 1)
    K = num_classes
    beta, gamma = schedule.betas[t], schedule.gammas[t]
    n = schedule.transition.num_states(K)
    q = np.zeros((n, n))
    q[:K, :K] = beta / K
    q[np.arange(K), np.arange(K)] += 1.0 - beta - gamma
    if schedule.transition.uses_mask:
        q[:K, K] = gamma
        q[K, K] = 1.0
    return q


def _cumulative_stack(schedule: NoiseSchedule, num_classes: int) -> np.ndarray:
    key = ("qbar", num_classes)
    if key not in schedule._cache:
        n = schedule.transition.num_states(num_classes)
        mats = np.empty((schedule.T + 1, n, n))
        mats[0] = np.eye(n)
        for t in range(1, schedule.T + 1):
            mats[t] = mats[t - 1] @ transition_matrix(schedule, t, num_classes)
        mats.setflags(write=False)
        schedule._cache[key] = mats
    return schedule._cache[key]


def cumulative_transition(schedule: NoiseSchedule, t: int, num_classes: int) -> np.ndarray:
    """``Qbar_t = Q_1 ... Q_t``; the identity at ``t = 0``."""
    t = _check_t(schedule, t, 0)
    return _cumulative_stack(schedule, num_classes)[t]


def composite_transition(schedule: NoiseSchedule, s: int, t: int, num_classes: int) -> np.ndarray:
    """``Q_{s+1} ... Q_t``: the transition from step ``s`` to step ``t > s``."""
    s = _check_t(schedule, s, 0)
    t = _check_t(schedule, t, 0)
    if s >= t:
        raise ValueError(f"need s < t, got s={s}, t={t}")
    key = ("composite", num_classes, s, t)
    if key not in schedule._cache:
        m = transition_matrix(schedule, s + 1, num_classes)
        for k in range(s + 2, t + 1):
            m = m @ transition_matrix(schedule, k, num_classes)
        schedule._cache[key] = m
    return schedule._cache[key]


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one index per row of ``probs`` (last axis) by inverse CDF."""
    cdf = np.cumsum(probs, axis=-1)
    cdf /= cdf[..., -1:]
    u = rng.random(probs.shape[:-1])
    return (cdf <= u[..., None]).sum(axis=-1).astype(np.int64)


def _broadcast_t(t, x: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    if t.ndim == 0:
        return t
    # per-sample timesteps over the leading axis
    return t.reshape(t.shape + (1,) * (x.ndim - t.ndim))


def q_probs(x0: LabelGrid, t, schedule: NoiseSchedule, num_classes: int) -> np.ndarray:
    """Rows ``x0 Qbar_t`` per pixel; ``t`` is a scalar or one value per sample."""
    stack = _cumulative_stack(schedule, num_classes)
    x0 = np.asarray(x0)
    tt = _broadcast_t(t, x0)
    if np.any(tt < 0) or np.any(tt > schedule.T):
        raise ValueError(f"timesteps must lie in [0, {schedule.T}]")
    return stack[tt, x0]


def q_sample(x0: LabelGrid, t, schedule: NoiseSchedule, num_classes: int, rng: np.random.Generator) -> LabelGrid:
    """Sample ``x_t ~ Cat(x0 Qbar_t)`` independently per pixel."""
    x0 = np.asarray(x0)
    if x0.size and x0.max() >= num_classes:
        raise ValueError("x0 must not contain MASK tokens")
    if np.all(np.asarray(t) == 0):
        return x0.astype(np.int64, copy=True)
    return sample_categorical(q_probs(x0, t, schedule, num_classes), rng)


def free_renoise(x0_pred: LabelGrid, t_next, schedule: NoiseSchedule, num_classes: int, rng: np.random.Generator) -> LabelGrid:
    """Re-noise a clean prediction with ``q(x_{t_next} | x0)``, ignoring the current state."""
    return q_sample(x0_pred, t_next, schedule, num_classes, rng)


def stationary_sample(shape, schedule: NoiseSchedule, num_classes: int, rng: np.random.Generator) -> LabelGrid:
    """Draw the starting state ``x_T``.

    Uniform over the real classes for replace-only, all-MASK for mask-only
    and the x0-independent row of ``Qbar_T`` otherwise.
    """
    shape = tuple(shape)
    kind = schedule.transition
    if not kind.uses_mask:
        return rng.integers(0, num_classes, size=shape, dtype=np.int64)
    if kind.replace_fraction == 0.0:
        return np.full(shape, num_classes, dtype=np.int64)
    row = cumulative_transition(schedule, schedule.T, num_classes)[0]
    return sample_categorical(np.broadcast_to(row, shape + row.shape), rng)


def posterior(x_t: LabelGrid, x0: LabelGrid, t: int, schedule: NoiseSchedule, num_classes: int, t_prev: int | None = None) -> np.ndarray:
    """``q(x_{t_prev} | x_t, x0)`` per pixel, ``t_prev`` defaulting to ``t - 1``.

    Computed as ``(x_t (Q_{t_prev+1..t})^T) * (x0 Qbar_{t_prev})`` normalised
    over the candidate states.
    """
    t = _check_t(schedule, t, 1)
    t_prev = t - 1 if t_prev is None else _check_t(schedule, t_prev, 0)
    if t_prev >= t:
        raise ValueError(f"t_prev={t_prev} must be below t={t}")
    step = transition_matrix(schedule, t, num_classes) if t_prev == t - 1 else composite_transition(schedule, t_prev, t, num_classes)
    qbar_prev = cumulative_transition(schedule, t_prev, num_classes)
    x_t = np.asarray(x_t)
    x0 = np.asarray(x0)
    num = step.T[x_t] * qbar_prev[x0]
    z = num.sum(axis=-1, keepdims=True)
    if np.any(z <= 0):
        raise ImpossibleStateError(f"q(x_t | x0) = 0 for {int(np.sum(z <= 0))} pixel(s) at t={t}")
    return num / z


def ce_loss_and_grad(logits: LogitsGrid, x0: LabelGrid) -> tuple[float, np.ndarray]:
    """Mean per-pixel cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits)
    x0 = np.asarray(x0)
    lp = log_softmax(logits.astype(np.float64))
    n = x0.size
    picked = np.take_along_axis(lp, x0[..., None], axis=-1)[..., 0]
    loss = float(-picked.sum() / n)
    grad = np.exp(lp)
    np.put_along_axis(grad, x0[..., None], np.take_along_axis(grad, x0[..., None], axis=-1) - 1.0, axis=-1)
    return loss, (grad / n).astype(logits.dtype, copy=False)


def ce_loss(logits: LogitsGrid, x0: LabelGrid) -> float:
    return ce_loss_and_grad(logits, x0)[0]


def _reverse_tables(schedule: NoiseSchedule, num_classes: int):
    """Per-t tables of ``q(x_{t-1} | x_t, x0=k)`` for every state pair.

    Returns ``(post, feasible)`` with shapes ``(T+1, S, K, S)`` and
    ``(T+1, S, K)`` where ``S`` is the number of states; infeasible
    ``(x_t, k)`` pairs have an all-zero posterior row.
    """
    key = ("reverse", num_classes)
    if key not in schedule._cache:
        K = num_classes
        S = schedule.transition.num_states(K)
        post = np.zeros((schedule.T + 1, S, K, S))
        feasible = np.zeros((schedule.T + 1, S, K), dtype=bool)
        for t in range(1, schedule.T + 1):
            q_t = transition_matrix(schedule, t, K)
            qbar_prev = cumulative_transition(schedule, t - 1, K)
            for xt in range(S):
                num = q_t[:, xt][None, :] * qbar_prev[:K]  # (K, S)
                z = num.sum(axis=1)
                ok = z > 0
                feasible[t, xt] = ok
                post[t, xt, ok] = num[ok] / z[ok, None]
        schedule._cache[key] = (post, feasible)
    return schedule._cache[key]


def vlb_loss_and_grad(logits: LogitsGrid, x_t: LabelGrid, x0: LabelGrid, t, schedule: NoiseSchedule, num_classes: int) -> tuple[float, np.ndarray]:
    """Sampled-t term of the variational bound and its logit gradient.

    The model reverse step is ``p(x_{t-1} | x_t) = sum_k w_k q(x_{t-1} | x_t, k)``
    with ``w = softmax(logits)`` restricted to the candidates ``k`` that
    could have produced ``x_t``.  The term is
    ``KL(q(x_{t-1} | x_t, x0) || p(x_{t-1} | x_t))``, which at ``t = 1``
    reduces to ``-log p(x0 | x_1)``.  Pixels whose ``(x_t, x0)`` pair is
    impossible contribute zero; the result is averaged over all pixels.
    """
    logits = np.asarray(logits)
    x_t = np.asarray(x_t)
    x0 = np.asarray(x0)
    post, feasible = _reverse_tables(schedule, num_classes)
    tt = _broadcast_t(t, x_t)
    if np.any(tt < 1) or np.any(tt > schedule.T):
        raise ValueError(f"vlb timesteps must lie in [1, {schedule.T}]")
    m = post[tt, x_t]  # (..., K, S)
    ok = feasible[tt, x_t]  # (..., K)
    q = np.take_along_axis(m, x0[..., None, None], axis=-2)[..., 0, :]  # (..., S)
    valid = np.take_along_axis(ok, x0[..., None], axis=-1)[..., 0]
    masked = np.where(ok, logits.astype(np.float64), -np.inf)
    masked = np.where(valid[..., None], masked, 0.0)
    w = softmax(masked)
    p = np.einsum("...k,...ks->...s", w, m)
    p = np.maximum(p, _LOG_FLOOR)
    logq = np.log(np.maximum(q, _LOG_FLOOR))
    kl = np.where(q > 0, q * (logq - np.log(p)), 0.0).sum(axis=-1)
    kl = np.where(valid, np.maximum(kl, 0.0), 0.0)
    n = x0.size
    g = -q / p  # dKL/dp
    v = np.einsum("...ks,...s->...k", m, g)
    dl = w * (v - (w * v).sum(axis=-1, keepdims=True))
    dl = np.where(valid[..., None], dl, 0.0) / n
    return float(kl.sum() / n), dl.astype(logits.dtype, copy=False)


def vlb_loss(logits: LogitsGrid, x_t: LabelGrid, x0: LabelGrid, t, schedule: NoiseSchedule, num_classes: int) -> float:
    return vlb_loss_and_grad(logits, x_t, x0, t, schedule, num_classes)[0]


def prior_kl(x0: LabelGrid, schedule: NoiseSchedule, num_classes: int) -> float:
    """``L_T = KL(q(x_T | x0) || p(x_T))`` averaged over pixels.

    ``p(x_T)`` is uniform over the real classes for replace-only, the MASK
    delta for mask-only, and the class-averaged row of ``Qbar_T`` otherwise.
    """
    qbar = cumulative_transition(schedule, schedule.T, num_classes)
    kind = schedule.transition
    S = kind.num_states(num_classes)
    if not kind.uses_mask:
        prior = np.full(S, 1.0 / num_classes)
    elif kind.replace_fraction == 0.0:
        prior = np.zeros(S)
        prior[num_classes] = 1.0
    else:
        prior = qbar[:num_classes].mean(axis=0)
    q = qbar[np.asarray(x0)]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(q > 0, q * (np.log(np.maximum(q, _LOG_FLOOR)) - np.log(np.maximum(prior, _LOG_FLOOR))), 0.0)
    return float(terms.sum(axis=-1).mean())
