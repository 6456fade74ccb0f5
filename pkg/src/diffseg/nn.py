"""Numpy layers with explicit backward passes (channel-last tensors).

Each layer is ``f(x, params, name) -> (y, back)`` where
``back(dy, grads) -> dx`` accumulates parameter gradients into ``grads``
under the same names the forward pass read.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

Params = dict[str, np.ndarray]


def _acc(grads: Params, key: str, value: np.ndarray) -> None:
    if key in grads:
        grads[key] += value
    else:
        grads[key] = value.copy()


def conv3x3(x: np.ndarray, params: Params, name: str):
    """Same-padded 3x3 convolution; weight shape ``(3, 3, Cin, Cout)``.

    The padded input is multiplied by all nine taps at once and the
    shifted slices of the result are summed, so the memory traffic scales
    with the output channels rather than nine copies of the input.
    """
    w = params[name + ".w"]
    b = params[name + ".b"]
    B, H, W, C = x.shape
    O = w.shape[-1]
    xp = np.zeros((B, H + 2, W + 2, C), dtype=x.dtype)
    xp[:, 1:-1, 1:-1] = x
    wall = w.transpose(2, 0, 1, 3).reshape(C, 9 * O)
    z = xp @ wall
    y = z[:, 0:H, 0:W, 0:O] + b
    for k in range(1, 9):
        i, j = divmod(k, 3)
        y += z[:, i : i + H, j : j + W, k * O : (k + 1) * O]
    del z

    def back(dy: np.ndarray, grads: Params) -> np.ndarray:
        dz = np.zeros((B, H + 2, W + 2, 9 * O), dtype=dy.dtype)
        for k in range(9):
            i, j = divmod(k, 3)
            dz[:, i : i + H, j : j + W, k * O : (k + 1) * O] = dy
        dzf = dz.reshape(-1, 9 * O)
        dwall = xp.reshape(-1, C).T @ dzf
        _acc(grads, name + ".w", dwall.reshape(C, 3, 3, O).transpose(1, 2, 0, 3))
        _acc(grads, name + ".b", dy.reshape(-1, O).sum(axis=0))
        dxp = dz @ wall.T
        return dxp[:, 1:-1, 1:-1, :]

    return y, back


def dense(x: np.ndarray, params: Params, name: str):
    """Affine map on the last axis (a 1x1 convolution for grids)."""
    w = params[name + ".w"]
    b = params[name + ".b"]
    y = x @ w + b

    def back(dy: np.ndarray, grads: Params) -> np.ndarray:
        _acc(grads, name + ".w", x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1]))
        _acc(grads, name + ".b", dy.reshape(-1, dy.shape[-1]).sum(axis=0))
        return dy @ w.T

    return y, back


def silu(x: np.ndarray):
    s = expit(x)
    y = x * s

    def back(dy: np.ndarray, grads: Params) -> np.ndarray:
        return dy * (s * (1.0 + x * (1.0 - s)))

    return y, back


def avgpool2(x: np.ndarray):
    B, H, W, C = x.shape
    y = x.reshape(B, H // 2, 2, W // 2, 2, C).mean(axis=(2, 4))

    def back(dy: np.ndarray, grads: Params) -> np.ndarray:
        return np.repeat(np.repeat(dy, 2, axis=1), 2, axis=2) * 0.25

    return y, back


def upsample2(x: np.ndarray):
    y = np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)

    def back(dy: np.ndarray, grads: Params) -> np.ndarray:
        B, H, W, C = dy.shape
        return dy.reshape(B, H // 2, 2, W // 2, 2, C).sum(axis=(2, 4))

    return y, back


def embed(idx: np.ndarray, params: Params, name: str):
    table = params[name]
    y = table[idx]

    def back(dy: np.ndarray, grads: Params) -> None:
        onehot = np.eye(table.shape[0], dtype=dy.dtype)[idx.reshape(-1)]
        _acc(grads, name, onehot.T @ dy.reshape(-1, dy.shape[-1]))

    return y, back


def scale_shift(h: np.ndarray, ss: np.ndarray):
    """``h * (1 + scale) + shift`` with per-sample, per-channel ``ss = [scale, shift]``."""
    C = h.shape[-1]
    scale = ss[:, None, None, :C]
    shift = ss[:, None, None, C:]
    y = h * (1.0 + scale) + shift

    def back(dy: np.ndarray, grads: Params):
        dscale = (dy * h).sum(axis=(1, 2))
        dshift = dy.sum(axis=(1, 2))
        return dy * (1.0 + scale), np.concatenate([dscale, dshift], axis=-1)

    return y, back


def self_attention(x: np.ndarray, params: Params, name: str):
    """Single-head spatial self-attention with a residual connection."""
    B, H, W, C = x.shape
    t = x.reshape(B, H * W, C)
    wq, wk, wv, wo = (params[f"{name}.{k}"] for k in ("wq", "wk", "wv", "wo"))
    q, k, v = t @ wq, t @ wk, t @ wv
    scale = 1.0 / np.sqrt(C)
    s = np.einsum("bnc,bmc->bnm", q, k) * scale
    s = s - s.max(axis=-1, keepdims=True)
    a = np.exp(s)
    a /= a.sum(axis=-1, keepdims=True)
    o = np.einsum("bnm,bmc->bnc", a, v)
    y = (t + o @ wo).reshape(B, H, W, C)

    def back(dy: np.ndarray, grads: Params) -> np.ndarray:
        dt = dy.reshape(B, H * W, C)
        _acc(grads, name + ".wo", o.reshape(-1, C).T @ dt.reshape(-1, C))
        do = dt @ wo.T
        da = np.einsum("bnc,bmc->bnm", do, v)
        dv = np.einsum("bnm,bnc->bmc", a, do)
        ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
        dq = np.einsum("bnm,bmc->bnc", ds, k)
        dk = np.einsum("bnm,bnc->bmc", ds, q)
        flat = t.reshape(-1, C)
        _acc(grads, name + ".wq", flat.T @ dq.reshape(-1, C))
        _acc(grads, name + ".wk", flat.T @ dk.reshape(-1, C))
        _acc(grads, name + ".wv", flat.T @ dv.reshape(-1, C))
        dx = dt + dq @ wq.T + dk @ wk.T + dv @ wv.T
        return dx.reshape(B, H, W, C)

    return y, back


class Adam:
    """Adam with bias correction; moments live alongside the parameter dict."""

    def __init__(self, params: Params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step_count = 0

    def step(self, params: Params, grads: Params, lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            params[k] -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
