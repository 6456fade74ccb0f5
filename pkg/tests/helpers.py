"""Shared constructions for the test suite."""

from fractions import Fraction

import numpy as np

from diffseg.denoiser import forward, init_params, loss_and_grad, zeros_like_params
from diffseg.discrete import NoiseSchedule, TransitionKind, ce_loss


def copy_weights(cfg, scale=2.0):
    """Denoiser weights whose logits reproduce the one-hot block of the features.

    Everything is zero except a path stem -> skip connections -> head, so
    the output ignores the noisy mask and the timestep entirely.
    """
    params = zeros_like_params(init_params(cfg, np.random.default_rng(0), np.float64))
    K, E = cfg.num_classes, cfg.embed_dim
    for k in range(K):
        params["stem.w"][1, 1, E + k, k] = scale
        # last up block: its skip part carries the stem path straight to the head
        params["up0.skip.w"][cfg.channels[1] + k, k] = 1.0
        params["head.w"][k, k] = 1.0
    return params


def random_schedule(T: int, kind: TransitionKind, seed: int) -> NoiseSchedule:
    """Arbitrary per-step corruption budgets, none of them degenerate."""
    rng = np.random.default_rng(seed)
    c = np.concatenate([[0.0], rng.uniform(0.05, 0.7, T)])
    return NoiseSchedule("random", T, kind, np.cumprod(1.0 - c), c)


def step_matrix_oracle(kind: TransitionKind, c: float, K: int) -> np.ndarray:
    """Q_t written entry by entry."""
    f = kind.replace_fraction
    beta, gamma = f * c, (1 - f) * c
    n = K + 1 if kind.uses_mask else K
    q = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i == K:
                q[i, j] = 1.0 if j == K else 0.0
            elif j == K:
                q[i, j] = gamma
            else:
                q[i, j] = beta / K + (1.0 - beta - gamma) * (i == j)
    return q


def bayes_posterior(s: NoiseSchedule, kind: TransitionKind, K: int, t: int, xt: int, x0: int) -> np.ndarray:
    """q(x_{t-1} | x_t, x0) by Bayes' rule over explicit chains of step matrices."""
    n = kind.num_states(K)
    qbar_prev = np.eye(n)
    for k in range(1, t):
        qbar_prev = qbar_prev @ step_matrix_oracle(kind, s.corruption[k], K)
    q_t = step_matrix_oracle(kind, s.corruption[t], K)
    joint = np.array([q_t[prev, xt] * qbar_prev[x0, prev] for prev in range(n)])
    return joint / joint.sum()


def finite_difference_check(cfg, params, inputs, entries_per_tensor=None, seed=0):
    """Worst relative error between analytic and central-difference gradients per tensor."""
    noisy, feats, t, target = inputs
    _, grads = loss_and_grad(params, cfg, noisy, feats, t, target)
    loss = lambda: ce_loss(forward(params, cfg, noisy, feats, t), target)
    rng = np.random.default_rng(seed)
    errors = {}
    h = 1e-6
    for name, arr in params.items():
        flat = arr.reshape(-1)
        idx = np.arange(flat.size) if entries_per_tensor is None else rng.choice(flat.size, min(entries_per_tensor, flat.size), replace=False)
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss()
            flat[i] = orig - h
            lm = loss()
            flat[i] = orig
            num[j] = (lp - lm) / (2 * h)
        ana = grads[name].reshape(-1)[idx]
        errors[name] = np.max(np.abs(ana - num)) / max(np.max(np.abs(num)), 1e-8)
    return errors


def band_oracle(mask, d):
    """Pixels of ``mask`` with a non-mask pixel (or the outside of the image) within Chebyshev distance d."""
    h, w = mask.shape
    out = np.zeros_like(mask, dtype=bool)
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            for dy in range(-d, d + 1):
                for dx in range(-d, d + 1):
                    yy, xx = y + dy, x + dx
                    if not (0 <= yy < h and 0 <= xx < w) or not mask[yy, xx]:
                        out[y, x] = True
    return out


def biou_oracle(pred, gt, K, d):
    per = []
    for c in range(K):
        pm, gm = pred == c, gt == c
        if not (pm.any() or gm.any()):
            continue
        pb, gb = band_oracle(pm, d), band_oracle(gm, d)
        per.append(Fraction(int((pb & gb).sum()), int((pb | gb).sum())))
    return per


def shifted_square():
    gt = np.zeros((8, 8), dtype=int)
    pred = np.zeros((8, 8), dtype=int)
    gt[2:6, 2:6] = 1
    pred[2:6, 3:7] = 1
    return pred, gt
