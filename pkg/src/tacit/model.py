"""Diffusion transformer that maps ``(x_t, t)`` to a velocity image.

Images are channel-first float arrays ``(B, 3, R, R)``. Patches are numbered
row-major over the patch grid and flattened channel, then row, then column.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from tacit import autodiff as ad
from tacit.autodiff import Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    resolution: int = 64
    patch_size: int = 8
    hidden: int = 384
    depth: int = 8
    heads: int = 6
    freq_dim: int = 256
    mlp_ratio: int = 4
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.resolution % self.patch_size:
            raise ConfigError(f"resolution {self.resolution} not divisible by patch size {self.patch_size}")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by {self.heads} heads")
        if self.hidden % 4:
            raise ConfigError("hidden dim must be divisible by 4 for the 2D positional table")
        if self.freq_dim % 2 or self.freq_dim < 4:
            raise ConfigError("freq_dim must be even and >= 4")

    @property
    def grid(self) -> int:
        return self.resolution // self.patch_size

    @property
    def tokens(self) -> int:
        return self.grid**2

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * 3

    @property
    def mlp_hidden(self) -> int:
        return self.mlp_ratio * self.hidden

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**d)


PAPER = ModelConfig()
DESK = ModelConfig(resolution=32, patch_size=4, hidden=128, depth=4, heads=4)
PRESETS = {"paper": PAPER, "desk": DESK}


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, p = cfg.hidden, cfg.patch_dim
    shapes: dict[str, tuple[int, ...]] = {
        "patch.w": (p, d),
        "patch.b": (d,),
        "t_embed.fc1.w": (cfg.freq_dim, d),
        "t_embed.fc1.b": (d,),
        "t_embed.fc2.w": (d, d),
        "t_embed.fc2.b": (d,),
    }
    for i in range(cfg.depth):
        b = f"blocks.{i}."
        shapes.update(
            {
                b + "ada1.w": (d, 2 * d),
                b + "ada1.b": (2 * d,),
                b + "attn.qkv.w": (d, 3 * d),
                b + "attn.qkv.b": (3 * d,),
                b + "attn.proj.w": (d, d),
                b + "attn.proj.b": (d,),
                b + "ada2.w": (d, 2 * d),
                b + "ada2.b": (2 * d,),
                b + "mlp.fc1.w": (d, cfg.mlp_hidden),
                b + "mlp.fc1.b": (cfg.mlp_hidden,),
                b + "mlp.fc2.w": (cfg.mlp_hidden, d),
                b + "mlp.fc2.b": (d,),
            }
        )
    shapes.update({"final.ada.w": (d, 2 * d), "final.ada.b": (2 * d,), "final.proj.w": (d, p), "final.proj.b": (p,)})
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return sum(math.prod(s) for s in param_shapes(cfg).values())


def _zero_init(name: str) -> bool:
    # identity blocks and zero velocity at init
    return name.endswith((".ada1.w", ".ada2.w", "ada.w", "attn.proj.w", "mlp.fc2.w", "final.proj.w"))


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(np.float32)


def init_params(cfg: ModelConfig, seed: int = 0, std: float = 0.02) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            arr = np.zeros(shape, dtype=np.float32)
            if name.endswith(("ada1.b", "ada2.b", "ada.b")):
                arr[: cfg.hidden] = 1.0  # gamma bias; beta bias stays 0
        elif _zero_init(name):
            arr = np.zeros(shape, dtype=np.float32)
        else:
            arr = _trunc_normal(rng, shape, std)
        params[name] = arr
    return params


# --- fixed encodings ---------------------------------------------------------


def pos_encoding_2d(grid: int, dim: int) -> np.ndarray:
    """Frozen 2D sinusoidal table ``(grid**2, dim)``; x in the first half, y in the second."""
    if dim % 4:
        raise ConfigError(f"positional dim {dim} not divisible by 4")
    half = dim // 2
    i = np.arange(half // 2, dtype=np.float64)
    freq = 1.0 / 10000.0 ** (2 * i / half)

    def encode(pos):
        ang = pos[:, None] * freq[None, :]
        out = np.empty((len(pos), half))
        out[:, 0::2] = np.sin(ang)
        out[:, 1::2] = np.cos(ang)
        return out

    rows, cols = np.divmod(np.arange(grid * grid, dtype=np.float64), grid)
    return np.concatenate([encode(cols), encode(rows)], axis=1).astype(np.float32)


def timestep_features(t, dim: int = 256) -> np.ndarray:
    """``dim/2`` sines then ``dim/2`` cosines of raw ``t`` at frequencies 10000**(-k/(dim/2 - 1))."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(t < 0.0) or np.any(t > 1.0) or not np.all(np.isfinite(t)):
        raise ValueError(f"timestep outside [0, 1]: {t}")
    half = dim // 2
    freq = 10000.0 ** (-np.arange(half) / (half - 1))
    ang = t[:, None] * freq[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


# --- patches -----------------------------------------------------------------


def patchify(images: np.ndarray, p: int) -> np.ndarray:
    """``(B, 3, R, R)`` or ``(3, R, R)`` -> ``(B, (R/p)**2, 3*p*p)``."""
    x = images[None] if images.ndim == 3 else images
    b, c, h, w = x.shape
    if h % p or w % p:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {p}")
    g_h, g_w = h // p, w // p
    x = x.reshape(b, c, g_h, p, g_w, p).transpose(0, 2, 4, 1, 3, 5)
    out = x.reshape(b, g_h * g_w, c * p * p)
    return out[0] if images.ndim == 3 else out


def unpatchify(tokens, p: int, resolution: int, channels: int = 3):
    """Inverse of :func:`patchify`; works on arrays and on tape tensors."""
    g = resolution // p
    if tokens.shape[-2] != g * g or tokens.shape[-1] != channels * p * p:
        raise ConfigError(f"token shape {tokens.shape} does not fit {resolution}px / patch {p}")
    squeeze = len(tokens.shape) == 2
    if squeeze:
        tokens = tokens.reshape(1, *tokens.shape)
    b = tokens.shape[0]
    x = tokens.reshape(b, g, g, channels, p, p).transpose(0, 3, 1, 4, 2, 5).reshape(b, channels, resolution, resolution)
    if squeeze:
        x = x.reshape(channels, resolution, resolution)
    return x


# --- layers --------------------------------------------------------------------


def adaln_modulate(h: Tensor, e_t: Tensor, w: Tensor, b: Tensor, eps: float = 1e-6) -> Tensor:
    """``gamma(e_t) * layer_norm(h) + beta(e_t)`` with ``[gamma, beta] = e_t @ w + b``."""
    d = h.shape[-1]
    mod = ad.linear(e_t, w, b)
    batch = mod.shape[0]
    gamma = mod[:, :d].reshape(batch, 1, d)
    beta = mod[:, d:].reshape(batch, 1, d)
    return gamma * ad.layer_norm(h, eps) + beta


def attention(h: Tensor, P: Mapping[str, Tensor], prefix: str, heads: int) -> Tensor:
    b, n, d = h.shape
    dk = d // heads
    qkv = ad.linear(h, P[prefix + "qkv.w"], P[prefix + "qkv.b"])
    qkv = qkv.reshape(b, n, 3, heads, dk).transpose(2, 0, 3, 1, 4)
    o = ad.scaled_attention(qkv[0], qkv[1], qkv[2])
    o = o.transpose(0, 2, 1, 3).reshape(b, n, d)
    return ad.linear(o, P[prefix + "proj.w"], P[prefix + "proj.b"])


def block_forward(h: Tensor, e_t: Tensor, P: Mapping[str, Tensor], i: int, cfg: ModelConfig) -> Tensor:
    b = f"blocks.{i}."
    h = h + attention(adaln_modulate(h, e_t, P[b + "ada1.w"], P[b + "ada1.b"], cfg.ln_eps), P, b + "attn.", cfg.heads)
    z = adaln_modulate(h, e_t, P[b + "ada2.w"], P[b + "ada2.b"], cfg.ln_eps)
    z = ad.linear(ad.gelu(ad.linear(z, P[b + "mlp.fc1.w"], P[b + "mlp.fc1.b"])), P[b + "mlp.fc2.w"], P[b + "mlp.fc2.b"])
    return h + z


def timestep_embed(t, P: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    dtype = P["t_embed.fc1.w"].dtype
    feats = Tensor(timestep_features(t, cfg.freq_dim).astype(dtype))
    z = ad.silu(ad.linear(feats, P["t_embed.fc1.w"], P["t_embed.fc1.b"]))
    return ad.linear(z, P["t_embed.fc2.w"], P["t_embed.fc2.b"])


def model_forward(x: np.ndarray, t, P: Mapping[str, Tensor], cfg: ModelConfig, pos: np.ndarray | None = None) -> Tensor:
    """Predicted velocity ``(B, 3, R, R)`` for states ``x`` at times ``t`` (scalar or per-sample)."""
    x = np.asarray(x)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.shape[1:] != (3, cfg.resolution, cfg.resolution):
        raise ConfigError(f"input shape {x.shape[1:]} does not match model resolution {cfg.resolution}")
    dtype = P["patch.w"].dtype
    batch = x.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))
    if pos is None:
        pos = pos_encoding_2d(cfg.grid, cfg.hidden)
    tokens = Tensor(patchify(x.astype(dtype, copy=False), cfg.patch_size))
    h = ad.linear(tokens, P["patch.w"], P["patch.b"]) + Tensor(pos.astype(dtype, copy=False))
    e_t = timestep_embed(t, P, cfg)
    for i in range(cfg.depth):
        h = block_forward(h, e_t, P, i, cfg)
    h = adaln_modulate(h, e_t, P["final.ada.w"], P["final.ada.b"], cfg.ln_eps)
    out = unpatchify(ad.linear(h, P["final.proj.w"], P["final.proj.b"]), cfg.patch_size, cfg.resolution)
    return out.reshape(3, cfg.resolution, cfg.resolution) if single else out


class DiT:
    """A model configuration bound to its parameter arrays.

    Calling the instance runs inference on plain arrays, which makes it a
    velocity field ``f(x, t)`` for the sampler.
    """

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)
        missing = set(param_shapes(config)) ^ set(self.params)
        if missing:
            raise ConfigError(f"parameter set mismatch: {sorted(missing)[:5]}")
        self.pos = pos_encoding_2d(config.grid, config.hidden)

    def forward(self, x, t, params: Mapping[str, Tensor] | None = None) -> Tensor:
        if params is None:
            params = {k: Tensor(v) for k, v in self.params.items()}
        return model_forward(x, t, params, self.config, self.pos)

    def __call__(self, x: np.ndarray, t) -> np.ndarray:
        return self.forward(x, t).data

    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())
