"""Base segmentation: a small trainable convnet and a corruption oracle.

Both produce ``(features, logits)`` at 1/4 resolution.  The convnet is a
stride-4 patchify stem, a few residual 3x3 blocks and a linear head;
its features are the activations the head reads.  The oracle skips
training altogether: it damages the ground truth with structured errors
(swapped objects, hollow interiors, jagged edges, spurious blobs) whose
rates grow with ``severity``, then mixes in pixels drawn from the
image's own class histogram with probability ``severity**4`` so that
``severity = 1`` is chance level.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
import logging
import math

import numpy as np
from scipy import ndimage

from . import nn
from .checkpoint import SEGMENTOR_MAGIC, read_container, write_container
from .discrete import ce_loss_and_grad
from .grids import SCALE, GridError, argmax_labels, encode_quarter, to_one_hot

log = logging.getLogger(__name__)

Params = dict[str, np.ndarray]


class FrozenModelError(RuntimeError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class SegmentorConfig:
    num_classes: int = 4
    feature_channels: int = 32
    blocks: int = 3

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class SegmentorParams:
    """Exported weights; the arrays are read-only and further updates are refused."""

    config: SegmentorConfig
    tensors: Params

    def __post_init__(self):
        for v in self.tensors.values():
            v.flags.writeable = False

    def apply_gradients(self, grads: Params, lr: float) -> None:
        raise FrozenModelError("segmentor parameters are frozen once exported")


def param_shapes(cfg: SegmentorConfig) -> dict[str, tuple[int, ...]]:
    C = cfg.feature_channels
    shapes = {"stem.w": (3 * SCALE * SCALE, C), "stem.b": (C,), "head.w": (C, cfg.num_classes), "head.b": (cfg.num_classes,)}
    for i in range(cfg.blocks):
        for j in (1, 2):
            shapes[f"block{i}.conv{j}.w"] = (3, 3, C, C)
            shapes[f"block{i}.conv{j}.b"] = (C,)
    return shapes


def init_params(cfg: SegmentorConfig, rng: np.random.Generator) -> Params:
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, np.float32)
        else:
            std = math.sqrt(1.0 / np.prod(shape[:-1])) * (0.3 if ".conv2." in name else 1.0)
            params[name] = rng.normal(0.0, std, shape).astype(np.float32)
    return params


def _patchify(images: np.ndarray) -> np.ndarray:
    B, H, W, _ = images.shape
    if H % SCALE or W % SCALE:
        raise GridError(f"image dims ({H}, {W}) must be divisible by {SCALE}")
    p = images.reshape(B, H // SCALE, SCALE, W // SCALE, SCALE, 3).transpose(0, 1, 3, 2, 4, 5)
    return p.reshape(B, H // SCALE, W // SCALE, 3 * SCALE * SCALE)


def _forward(params: Params, cfg: SegmentorConfig, images: np.ndarray, need_grad: bool = False):
    x = _patchify(images.astype(np.float32))
    h, b_stem = nn.dense(x, params, "stem")
    backs = []
    for i in range(cfg.blocks):
        a1, b1 = nn.silu(h)
        c1, b2 = nn.conv3x3(a1, params, f"block{i}.conv1")
        a2, b3 = nn.silu(c1)
        c2, b4 = nn.conv3x3(a2, params, f"block{i}.conv2")
        h = h + c2
        backs.append((b1, b2, b3, b4))
    feats, b_act = nn.silu(h)
    logits, b_head = nn.dense(feats, params, "head")
    if not need_grad:
        return feats, logits

    def back(dlogits):
        grads: Params = {}
        dh = b_act(b_head(dlogits, grads), grads)
        for b1, b2, b3, b4 in reversed(backs):
            dh = dh + b1(b2(b3(b4(dh, grads), grads), grads), grads)
        b_stem(dh, grads)
        return grads

    return feats, logits, back


def base_forward(image: np.ndarray, params: SegmentorParams | Params, cfg: SegmentorConfig | None = None):
    """``(features, logits)`` at 1/4 scale for one ``(H, W, 3)`` image or a batch."""
    if isinstance(params, SegmentorParams):
        cfg, params = params.config, params.tensors
    image = np.asarray(image)
    single = image.ndim == 3
    feats, logits = _forward(params, cfg, image[None] if single else image)
    return (feats[0], logits[0]) if single else (feats, logits)


def train_base(
    images: np.ndarray,
    labels: np.ndarray,
    iters: int = 1500,
    lr: float = 2e-3,
    batch_size: int = 16,
    seed: int = 0,
    cfg: SegmentorConfig = SegmentorConfig(),
    rng: np.random.Generator | None = None,
    history: list | None = None,
) -> SegmentorParams:
    """Fit the convnet to quarter-scale ground truth with Adam and random horizontal flips."""
    if len(images) == 0:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(seed) if rng is None else rng
    params = init_params(cfg, rng)
    opt = nn.Adam(params)
    targets = encode_quarter(np.asarray(labels))
    n = len(images)
    for it in range(iters):
        idx = rng.integers(0, n, batch_size)
        x, y = images[idx], targets[idx]
        flip = rng.random(batch_size) < 0.5
        x = np.where(flip[:, None, None, None], x[:, :, ::-1], x)
        y = np.where(flip[:, None, None], y[:, :, ::-1], y)
        _, logits, back = _forward(params, cfg, x, need_grad=True)
        loss, dl = ce_loss_and_grad(logits, y)
        if not math.isfinite(loss):
            raise TrainingDivergedError(f"segmentor loss became {loss} at iteration {it}")
        opt.step(params, back(dl), lr)
        if history is not None:
            history.append(loss)
        if it % 250 == 0:
            log.info("segmentor iter %d loss %.4f", it, loss)
    return SegmentorParams(cfg, params)


def save_segmentor(path, seg: SegmentorParams) -> None:
    write_container(path, SEGMENTOR_MAGIC, {"segmentor": seg.config.to_dict()}, dict(seg.tensors))


def load_segmentor(path) -> SegmentorParams:
    config, tensors = read_container(path, SEGMENTOR_MAGIC)
    cfg = SegmentorConfig(**config["segmentor"])
    if {k: tuple(v.shape) for k, v in tensors.items()} != param_shapes(cfg):
        raise ValueError("segmentor checkpoint tensors do not match its config")
    return SegmentorParams(cfg, tensors)


# ---------------------------------------------------------------------------
# corruption oracle
# ---------------------------------------------------------------------------


def _components(labels: np.ndarray, num_classes: int):
    for c in range(1, num_classes):
        comp, n = ndimage.label(labels == c)
        for i in range(1, n + 1):
            yield c, comp == i


def corrupt_labels(gt: np.ndarray, severity: float, rng: np.random.Generator, num_classes: int) -> np.ndarray:
    """Damaged copy of ``gt``; never emits MASK or out-of-range ids."""
    s = float(severity)
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"severity must lie in [0, 1], got {severity}")
    gt = np.asarray(gt, dtype=np.int64)
    out = gt.copy()
    if s == 0.0:
        return out
    h, w = gt.shape
    for c, comp in _components(gt, num_classes):
        u = rng.random(2)
        if u[0] < 0.35 * s:
            out[comp] = (c + rng.integers(1, num_classes)) % num_classes  # whole-object confusion
        elif u[1] < 0.6 * s and comp.sum() >= 4:
            ys, xs = np.nonzero(comp)
            k = rng.integers(len(ys))
            r = int(rng.integers(0, 2))
            hole = np.zeros_like(comp)
            hole[max(0, ys[k] - r) : ys[k] + r + 1, max(0, xs[k] - r) : xs[k] + r + 1] = True
            out[hole & comp] = 0
    # jagged edges: boundary pixels take a neighbouring class
    padded = np.pad(out, 1, mode="edge")
    neigh = np.stack([padded[:-2, 1:-1], padded[2:, 1:-1], padded[1:-1, :-2], padded[1:-1, 2:]])
    differs = neigh != out
    edge = differs.any(axis=0) & (rng.random((h, w)) < 0.5 * s)
    pick = rng.random((4, h, w)) * differs
    out = np.where(edge, np.take_along_axis(neigh, pick.argmax(axis=0)[None], axis=0)[0], out)
    for _ in range(rng.poisson(3.0 * s)):
        bh, bw = rng.integers(1, 3, size=2)
        y0, x0 = rng.integers(0, h - bh + 1), rng.integers(0, w - bw + 1)
        out[y0 : y0 + bh, x0 : x0 + bw] = rng.integers(0, num_classes)
    hist = np.bincount(gt.ravel(), minlength=num_classes) / gt.size
    mix = rng.random((h, w)) < s**4
    out[mix] = rng.choice(num_classes, size=int(mix.sum()), p=hist)
    return out


def corrupt_oracle(gt: np.ndarray, severity: float, rng: np.random.Generator, num_classes: int = 4, feature_channels: int = 32):
    """``(features, logits)`` for quarter-scale ``gt`` at the requested damage level.

    Logits put a margin of 3 on the damaged label plus U(-1, 1) jitter, so
    their argmax is exactly the damaged grid.  Features are its one-hot
    code in the first ``K`` channels followed by standard-normal channels.
    """
    if feature_channels < num_classes:
        raise ValueError("feature_channels must be at least num_classes")
    bad = corrupt_labels(gt, severity, rng, num_classes)
    onehot = to_one_hot(bad, num_classes)
    logits = 3.0 * onehot + rng.uniform(-1.0, 1.0, onehot.shape)
    noise = rng.normal(0.0, 1.0, bad.shape + (feature_channels - num_classes,))
    feats = np.concatenate([to_one_hot(argmax_labels(logits), num_classes), noise], axis=-1)
    return feats.astype(np.float32), logits.astype(np.float32)
