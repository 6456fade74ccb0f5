"""Conditional denoiser predicting clean-label logits from a noisy mask.

A small U-Net: the noisy label grid is embedded, concatenated with the
segmentor features and run through residual blocks over ``depth`` down
and up levels with skip connections.  The timestep enters every
residual block as a per-channel scale and shift computed from a
sinusoidal embedding.  Forward and backward passes are plain numpy.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
import math

import numpy as np

from . import nn
from .checkpoint import DENOISER_MAGIC, read_container, write_container
from .discrete import ce_loss_and_grad

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class DenoiserConfig:
    num_classes: int = 4
    feature_channels: int = 32
    base_channels: int = 32
    depth: int = 2
    embed_dim: int = 16
    time_dim: int = 32
    channel_mult: tuple[int, ...] = ()
    attention: tuple[bool, ...] = ()
    # probability of zeroing the features during training; >0 gives an unconditional branch
    cond_dropout: float = 0.0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.base_channels < 8:
            raise ValueError("base_channels must be >= 8")
        if self.time_dim % 2:
            raise ValueError("time_dim must be even")
        if not self.channel_mult:
            object.__setattr__(self, "channel_mult", (1,) + (2,) * self.depth)
        if not self.attention:
            object.__setattr__(self, "attention", (False,) * (self.depth + 1))
        object.__setattr__(self, "channel_mult", tuple(int(m) for m in self.channel_mult))
        object.__setattr__(self, "attention", tuple(bool(a) for a in self.attention))
        if len(self.channel_mult) != self.depth + 1 or len(self.attention) != self.depth + 1:
            raise ValueError("channel_mult and attention need depth + 1 entries")

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_mult]

    @property
    def time_hidden(self) -> int:
        return 2 * self.base_channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mult"] = list(self.channel_mult)
        d["attention"] = list(self.attention)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        d["channel_mult"] = tuple(d.get("channel_mult", ()))
        d["attention"] = tuple(d.get("attention", ()))
        return cls(**d)


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Interleaved ``[sin(t f_0), cos(t f_0), sin(t f_1), ...]`` at geometric frequencies."""
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    freqs = np.exp(-math.log(10000.0) * np.arange(dim // 2) / (dim // 2))
    ang = t[..., None] * freqs
    out = np.empty(t.shape + (dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def _block_shapes(cfg: DenoiserConfig):
    """(prefix, cin, cout, attention) for every residual block in forward order."""
    ch = cfg.channels
    blocks = []
    cin = ch[0]
    for lvl in range(cfg.depth):
        blocks.append((f"down{lvl}", cin, ch[lvl], cfg.attention[lvl]))
        cin = ch[lvl]
    blocks.append(("mid", cin, ch[cfg.depth], cfg.attention[cfg.depth]))
    for lvl in reversed(range(cfg.depth)):
        blocks.append((f"up{lvl}", ch[lvl + 1] + ch[lvl], ch[lvl], cfg.attention[lvl]))
    return blocks


def param_shapes(cfg: DenoiserConfig) -> dict[str, tuple[int, ...]]:
    K, C, E = cfg.num_classes, cfg.feature_channels, cfg.embed_dim
    ch0, th = cfg.channels[0], cfg.time_hidden
    shapes = {
        "embed": (K + 1, E),
        "stem.w": (3, 3, E + C, ch0),
        "stem.b": (ch0,),
        "time.fc.w": (cfg.time_dim, th),
        "time.fc.b": (th,),
        "head.w": (ch0, K),
        "head.b": (K,),
    }
    for prefix, cin, cout, attn in _block_shapes(cfg):
        shapes[f"{prefix}.conv1.w"] = (3, 3, cin, cout)
        shapes[f"{prefix}.conv1.b"] = (cout,)
        shapes[f"{prefix}.ss.w"] = (th, 2 * cout)
        shapes[f"{prefix}.ss.b"] = (2 * cout,)
        shapes[f"{prefix}.conv2.w"] = (3, 3, cout, cout)
        shapes[f"{prefix}.conv2.b"] = (cout,)
        if cin != cout:
            shapes[f"{prefix}.skip.w"] = (cin, cout)
            shapes[f"{prefix}.skip.b"] = (cout,)
        if attn:
            for k in ("wq", "wk", "wv", "wo"):
                shapes[f"{prefix}.attn.{k}"] = (cout, cout)
    return shapes


def init_params(cfg: DenoiserConfig, rng: np.random.Generator, dtype=np.float32) -> Params:
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            arr = np.zeros(shape)
        elif name == "embed":
            arr = rng.normal(0.0, 1.0, shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            std = math.sqrt(1.0 / fan_in)
            if ".conv2." in name or name.endswith(".wo") or name.startswith("head"):
                std *= 0.3
            if ".ss." in name:
                std *= 0.1
            arr = rng.normal(0.0, std, shape)
        params[name] = arr.astype(dtype)
    return params


def zeros_like_params(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


def _resblock(x, temb, params, prefix, cin, cout, attn, backs):
    a1, b_a1 = nn.silu(x)
    h1, b_c1 = nn.conv3x3(a1, params, prefix + ".conv1")
    ss, b_ss = nn.dense(temb, params, prefix + ".ss")
    h2, b_mod = nn.scale_shift(h1, ss)
    a2, b_a2 = nn.silu(h2)
    h3, b_c2 = nn.conv3x3(a2, params, prefix + ".conv2")
    if cin != cout:
        skip, b_skip = nn.dense(x, params, prefix + ".skip")
    else:
        skip, b_skip = x, None
    out = skip + h3
    b_attn = None
    if attn:
        out, b_attn = nn.self_attention(out, params, prefix + ".attn")

    def back(dout, grads):
        if b_attn is not None:
            dout = b_attn(dout, grads)
        da2 = b_c2(dout, grads)
        dh2 = b_a2(da2, grads)
        dh1, dss = b_mod(dh2, grads)
        dtemb = b_ss(dss, grads)
        dx = b_a1(b_c1(dh1, grads), grads)
        dx = dx + (b_skip(dout, grads) if b_skip is not None else dout)
        return dx, dtemb

    backs.append(back)
    return out


def forward(params: Params, cfg: DenoiserConfig, noisy, features, t, need_grad: bool = False):
    """Logits ``(B, h, w, K)`` for noisy labels ``(B, h, w)`` and features ``(B, h, w, C)``.

    Unbatched inputs are accepted and give unbatched output.  With
    ``need_grad`` the result is ``(logits, back)`` where ``back(dlogits)``
    returns the parameter gradients.
    """
    dtype = params["stem.w"].dtype
    noisy = np.asarray(noisy)
    features = np.asarray(features, dtype=dtype)
    single = noisy.ndim == 2
    if single:
        noisy = noisy[None]
        features = features[None]
    B, h, w = noisy.shape
    if features.shape[:3] != (B, h, w):
        raise ValueError(f"features {features.shape[:3]} do not match noisy mask {noisy.shape}")
    if features.shape[3] != cfg.feature_channels:
        raise ValueError(f"expected {cfg.feature_channels} feature channels, got {features.shape[3]}")
    if h % 2**cfg.depth or w % 2**cfg.depth:
        raise ValueError(f"grid {h}x{w} must be divisible by 2**depth = {2**cfg.depth}")
    t = np.broadcast_to(np.asarray(t), (B,))

    emb, b_emb = nn.embed(noisy, params, "embed")
    x = np.concatenate([emb.astype(dtype), features], axis=-1)
    tsin = timestep_embedding(t, cfg.time_dim).astype(dtype)
    tpre, b_tfc = nn.dense(tsin, params, "time.fc")
    temb, b_tact = nn.silu(tpre)

    backs: list = []
    hcur, b_stem = nn.conv3x3(x, params, "stem")
    blocks = _block_shapes(cfg)
    skips = []
    pool_backs = []
    for lvl in range(cfg.depth):
        prefix, cin, cout, attn = blocks[lvl]
        hcur = _resblock(hcur, temb, params, prefix, cin, cout, attn, backs)
        skips.append(hcur)
        hcur, b_pool = nn.avgpool2(hcur)
        pool_backs.append(b_pool)
    prefix, cin, cout, attn = blocks[cfg.depth]
    hcur = _resblock(hcur, temb, params, prefix, cin, cout, attn, backs)
    up_backs = []
    for i, lvl in enumerate(reversed(range(cfg.depth))):
        prefix, cin, cout, attn = blocks[cfg.depth + 1 + i]
        hcur, b_up = nn.upsample2(hcur)
        up_backs.append((b_up, hcur.shape[-1]))
        hcur = np.concatenate([hcur, skips[lvl]], axis=-1)
        hcur = _resblock(hcur, temb, params, prefix, cin, cout, attn, backs)
    act, b_act = nn.silu(hcur)
    logits, b_head = nn.dense(act, params, "head")

    if not need_grad:
        return logits[0] if single else logits

    def back(dlogits: np.ndarray) -> Params:
        grads: Params = {}
        dlogits = np.asarray(dlogits, dtype=dtype)
        if single:
            dlogits = dlogits[None]
        dh = b_act(b_head(dlogits, grads), grads)
        dtemb = np.zeros_like(temb)
        dskips = [None] * cfg.depth
        # up blocks ran for lvl = depth-1 .. 0, so unwind lvl = 0 .. depth-1
        for lvl in range(cfg.depth):
            i = cfg.depth - 1 - lvl
            dh, dt_blk = backs[cfg.depth + 1 + i](dh, grads)
            dtemb += dt_blk
            b_up, n_up = up_backs[i]
            dskips[lvl] = dh[..., n_up:]
            dh = b_up(dh[..., :n_up], grads)
        dh, dt_blk = backs[cfg.depth](dh, grads)
        dtemb += dt_blk
        for lvl in reversed(range(cfg.depth)):
            dh = pool_backs[lvl](dh, grads) + dskips[lvl]
            dh, dt_blk = backs[lvl](dh, grads)
            dtemb += dt_blk
        dx = b_stem(dh, grads)
        b_emb(dx[..., : cfg.embed_dim], grads)
        b_tfc(b_tact(dtemb, grads), grads)
        return grads

    return (logits[0] if single else logits), back


def loss_and_grad(params: Params, cfg: DenoiserConfig, noisy, features, t, target) -> tuple[float, Params]:
    """Mean cross-entropy of the clean-label prediction and its parameter gradients."""
    logits, back = forward(params, cfg, noisy, features, t, need_grad=True)
    loss, dlogits = ce_loss_and_grad(logits, target)
    return loss, back(dlogits)


@dataclass
class EmaState:
    shadow: Params
    decay: float = 0.99
    update_interval: int = 25
    calls: int = 0

    @classmethod
    def create(cls, params: Params, decay: float = 0.99, update_interval: int = 25) -> "EmaState":
        return cls({k: v.copy() for k, v in params.items()}, decay, update_interval)


def ema_update(ema: EmaState, params: Params) -> EmaState:
    """Count one training step; every ``update_interval`` steps blend the shadow towards ``params``."""
    if ema.shadow.keys() != params.keys() or any(ema.shadow[k].shape != params[k].shape for k in params):
        raise ValueError("EMA shadow and params have different shapes")
    ema.calls += 1
    if ema.calls % ema.update_interval == 0:
        d = ema.decay
        for k, v in params.items():
            s = ema.shadow[k]
            if d == 0.0:
                s[...] = v
            else:
                s += (1.0 - d) * (v - s)  # exact fixed point when s == v
    return ema


def save_params(path, cfg: DenoiserConfig, params: Params, ema: Params | None = None, extra: dict | None = None) -> None:
    config = {"denoiser": cfg.to_dict(), **(extra or {})}
    tensors = {f"params/{k}": v for k, v in params.items()}
    if ema is not None:
        tensors.update({f"ema/{k}": v for k, v in ema.items()})
    write_container(path, DENOISER_MAGIC, config, tensors)


def load_params(path) -> tuple[DenoiserConfig, Params, Params | None, dict]:
    """Return ``(config, params, ema_or_None, extra_config)``."""
    config, tensors = read_container(path, DENOISER_MAGIC)
    cfg = DenoiserConfig.from_dict(config.pop("denoiser"))
    params = {k[len("params/") :]: v for k, v in tensors.items() if k.startswith("params/")}
    ema = {k[len("ema/") :]: v for k, v in tensors.items() if k.startswith("ema/")} or None
    expected = param_shapes(cfg)
    for group in (params, ema or {}):
        if {k: tuple(v.shape) for k, v in group.items()} != expected:
            raise ValueError("checkpoint tensors do not match the stored denoiser config")
    return cfg, params, ema, config
