"""Grid conventions, label/one-hot/logit conversions and the resize codec.

All grids are plain numpy arrays in channel-last layout:

* label grids: integer ``(..., H, W)`` with values in ``[0, K)``; the MASK
  token, when a transition uses one, is the id ``K``.
* logits / categorical grids: float ``(..., H, W, K)``.

The mask codec works at 1/4 scale: :func:`encode_quarter` downsamples
ground truth by nearest neighbour (top-left pixel of each 4x4 block) and
:func:`decode_full` upsamples logits bilinearly with half-pixel centres
before taking the argmax.
"""

from __future__ import annotations

import numpy as np

SCALE = 4

LabelGrid = np.ndarray
LogitsGrid = np.ndarray
CategoricalGrid = np.ndarray


class GridError(ValueError):
    """Raised for malformed grids (bad shape, range or dimensions)."""


def check_labels(labels: LabelGrid, num_classes: int, allow_mask: bool = False) -> LabelGrid:
    labels = np.asarray(labels)
    if labels.ndim < 2 or labels.shape[-1] < 1 or labels.shape[-2] < 1:
        raise GridError(f"label grid needs shape (..., H, W), got {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise GridError(f"label grid must be integer, got {labels.dtype}")
    upper = num_classes + 1 if allow_mask else num_classes
    if labels.size and (labels.min() < 0 or labels.max() >= upper):
        raise GridError(f"label values must lie in [0, {upper}), got [{labels.min()}, {labels.max()}]")
    return labels


def to_one_hot(labels: LabelGrid, num_classes: int) -> CategoricalGrid:
    """Delta distribution per pixel, shape ``labels.shape + (num_classes,)``."""
    labels = check_labels(labels, num_classes)
    return np.eye(num_classes, dtype=np.float64)[labels]


def argmax_labels(logits: LogitsGrid) -> LabelGrid:
    """Per-pixel argmax over the last axis; ties go to the lowest class."""
    logits = np.asarray(logits)
    if not np.all(np.isfinite(logits)):
        raise GridError("logits must be finite")
    return np.argmax(logits, axis=-1).astype(np.int64)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def encode_quarter(labels: LabelGrid) -> LabelGrid:
    """Nearest-neighbour downsample to (H/4, W/4) using each block's top-left pixel."""
    labels = np.asarray(labels)
    h, w = labels.shape[-2:]
    if h % SCALE or w % SCALE:
        raise GridError(f"grid {h}x{w} is not divisible by {SCALE}")
    return labels[..., ::SCALE, ::SCALE].copy()


def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centres; source coordinates clamped at the borders
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), i0), 1.0 - frac)
    np.add.at(m, (np.arange(n_out), i1), frac)
    return m


def upsample_bilinear(logits: LogitsGrid, target_h: int, target_w: int) -> np.ndarray:
    """Bilinear resize of ``(..., h, w, K)`` to ``(..., target_h, target_w, K)``."""
    logits = np.asarray(logits, dtype=np.float64)
    h, w = logits.shape[-3:-1]
    mh = _bilinear_matrix(h, target_h)
    mw = _bilinear_matrix(w, target_w)
    return np.einsum("ph,...hwk,qw->...pqk", mh, logits, mw, optimize=True)


def decode_full(logits: LogitsGrid, target_h: int, target_w: int) -> LabelGrid:
    """Upsample 1/4-scale logits to full resolution and take the argmax."""
    logits = np.asarray(logits)
    if logits.ndim < 3:
        raise GridError(f"logits need shape (..., h, w, K), got {logits.shape}")
    h, w = logits.shape[-3:-1]
    if (target_h, target_w) != (h * SCALE, w * SCALE):
        raise GridError(f"target {target_h}x{target_w} must be {SCALE}x the logits grid {h}x{w}")
    return argmax_labels(upsample_bilinear(logits, target_h, target_w))
