"""Pipeline pieces shared by the CLI and the desk-scale experiments.

A *base* turns a dataset split into quarter-scale ``(features, logits)``.
Two kinds exist: ``oracle:<severity>[:<seed>]`` damages the ground truth
with the corruption oracle (each sample's stream keyed by its label
path, so results do not depend on ordering or batching), and a path to
a segmentor checkpoint runs the trained convnet.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .denoiser import DenoiserConfig, Params
from .discrete import NoiseSchedule
from .grids import argmax_labels, decode_full, encode_quarter
from .metrics import eval_report
from .refiner import RefineConfig, refine
from .rng import STREAM_ORACLE, STREAM_REFINE, name_id, stream
from .segmentor import base_forward, corrupt_oracle, load_segmentor
from .synthdata import load_image, load_labels, read_manifest
from .trainer import PriorData


@dataclass
class Split:
    images: np.ndarray  # (N, H, W, 3)
    labels: np.ndarray  # (N, H, W)
    keys: list[str]  # label paths as written in the manifest

    def __len__(self) -> int:
        return len(self.keys)


def load_split(data_dir, split: str = "train", limit: int | None = None) -> Split:
    manifest = Path(data_dir) / f"{split}.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest {manifest}")
    rows = read_manifest(manifest)[:limit]
    if not rows:
        raise ValueError(f"{manifest} lists no samples")
    images = np.stack([load_image(img) for img, _, _ in rows])
    labels = np.stack([load_labels(lab) for _, lab, _ in rows])
    return Split(images, labels, [key for _, _, key in rows])


@dataclass(frozen=True)
class OracleBase:
    severity: float
    seed: int = 0
    num_classes: int = 4
    feature_channels: int = 32

    def predict(self, split: Split):
        feats, logits = [], []
        for lab, key in zip(split.labels, split.keys):
            f, l = corrupt_oracle(encode_quarter(lab), self.severity, stream(self.seed, STREAM_ORACLE, name_id(key)), self.num_classes, self.feature_channels)
            feats.append(f)
            logits.append(l)
        return np.stack(feats), np.stack(logits)


@dataclass(frozen=True)
class SegmentorBase:
    path: str

    def predict(self, split: Split, chunk: int = 64):
        seg = load_segmentor(self.path)
        out = [base_forward(split.images[i : i + chunk], seg) for i in range(0, len(split), chunk)]
        return np.concatenate([f for f, _ in out]), np.concatenate([l for _, l in out])


def parse_base(text: str, num_classes: int = 4, feature_channels: int = 32):
    """``oracle:<severity>[:<seed>]`` or a segmentor checkpoint path."""
    if text.startswith("oracle:"):
        parts = text.split(":")
        if len(parts) not in (2, 3):
            raise ValueError(f"bad oracle base spec {text!r}")
        severity = float(parts[1])
        seed = int(parts[2]) if len(parts) == 3 else 0
        return OracleBase(severity, seed, num_classes, feature_channels)
    if not Path(text).exists():
        raise FileNotFoundError(f"segmentor checkpoint {text} not found")
    return SegmentorBase(text)


def prior_data(base, split: Split) -> tuple[PriorData, np.ndarray]:
    """Training material for the denoiser plus the base logits."""
    feats, logits = base.predict(split)
    return PriorData(feats.astype(np.float32), encode_quarter(split.labels), argmax_labels(logits)), logits


def initial_labels(logits: np.ndarray, height: int, width: int) -> np.ndarray:
    return np.stack([decode_full(l, height, width) for l in logits])


def refine_split(
    params: Params,
    cfg: DenoiserConfig,
    schedule: NoiseSchedule,
    rcfg: RefineConfig,
    features: np.ndarray,
    keys: list[str],
    full_size: tuple[int, int],
    chunk: int = 50,
) -> np.ndarray:
    """Full-resolution refined labels; each sample uses the stream keyed by its label path."""
    out = []
    for i in range(0, len(keys), chunk):
        rngs = [stream(rcfg.seed, STREAM_REFINE, name_id(k)) for k in keys[i : i + chunk]]
        res = refine(features[i : i + chunk], params, cfg, schedule, rcfg, rngs, full_size)
        out.extend(r.labels for r in res)
    return np.stack(out)


def evaluate(preds, gts, num_classes: int, d: int | None = None, config_hash: str = "") -> dict:
    return eval_report(list(preds), list(gts), num_classes, d, config_hash)
