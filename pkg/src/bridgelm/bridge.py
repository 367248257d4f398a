"""Two-channel fusion bridge: trainable queries read an image through deep fusion.

Image patches go into the vision channel, the query bank into the text
channel. Every block runs self-attention inside each channel, then
cross-attention from each channel into the other channel's post-self-attention
states, then a feed-forward sublayer (all pre-norm residual). The final
text-channel states at the query slots are the fixed-length visual feature,
and a single affine map sends them into the decoder's embedding space.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .nn import Attention, FeedForward, LayerNorm, Linear, Module, param
from .tensor import Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BridgeConfig:
    d: int = 32
    n: int = 8
    num_blocks: int = 2
    num_heads: int = 2
    patch_size: int = 8
    image_size: int = 16
    d_lm: int = 48
    channels: int = 3
    ffn_mult: int = 4
    proj_bias: bool = True
    patch_bias: bool = True
    pos_embed: bool = True
    # grid the learned patch positions are stored at; 0 means image_size // patch_size
    pos_grid: int = 0
    init_std: float = 0.02

    def __post_init__(self):
        if self.d % self.num_heads:
            raise ConfigError(f"d={self.d} not divisible by num_heads={self.num_heads}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size={self.image_size} not divisible by patch_size={self.patch_size}")
        if self.n < 1:
            raise ConfigError("need at least one query vector")
        if self.pos_grid == 0:
            object.__setattr__(self, "pos_grid", self.image_size // self.patch_size)

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    def with_image_size(self, size: int) -> "BridgeConfig":
        return replace(self, image_size=size)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BridgeConfig":
        return cls(**d)


def _interp_1d(src: int, dst: int) -> np.ndarray:
    """Linear interpolation weights [dst, src] with aligned cell centres."""
    w = np.zeros((dst, src))
    if src == 1:
        w[:, 0] = 1.0
        return w
    for i in range(dst):
        x = (i + 0.5) * src / dst - 0.5
        x = min(max(x, 0.0), src - 1.0)
        lo = int(np.floor(x))
        hi = min(lo + 1, src - 1)
        frac = x - lo
        w[i, lo] += 1.0 - frac
        w[i, hi] += frac
    return w


def position_resampler(src_grid: int, dst_grid: int) -> np.ndarray:
    """Bilinear map from a src x src table of positions to dst x dst (row-major)."""
    if src_grid == dst_grid:
        return np.eye(src_grid * src_grid)
    w = _interp_1d(src_grid, dst_grid)
    return np.kron(w, w)


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    h, w, c = image.shape
    g = h // patch_size
    x = image.reshape(g, patch_size, g, patch_size, c).transpose(0, 2, 1, 3, 4)
    return x.reshape(g * g, patch_size * patch_size * c)


class PatchEmbed(Module):
    def __init__(self, cfg: BridgeConfig, rng):
        self.proj = Linear(cfg.patch_size**2 * cfg.channels, cfg.d, rng, bias=cfg.patch_bias, std=cfg.init_std)
        self.pos = param(rng, (cfg.pos_grid**2, cfg.d), cfg.init_std)


class QueryBank(Module):
    def __init__(self, cfg: BridgeConfig, rng):
        self.Q = param(rng, (cfg.n, cfg.d), cfg.init_std)
        self.pos = param(rng, (cfg.n, cfg.d), cfg.init_std)

    def states(self) -> Tensor:
        return self.Q + self.pos


class FusionChannel(Module):
    def __init__(self, cfg: BridgeConfig, rng, cross: bool = True):
        self.ln_self = LayerNorm(cfg.d)
        self.self_attn = Attention(cfg.d, cfg.num_heads, rng)
        self.has_cross = cross
        if not cross:
            return
        self.ln_cross = LayerNorm(cfg.d)
        self.ln_context = LayerNorm(cfg.d)
        self.cross_attn = Attention(cfg.d, cfg.num_heads, rng)
        self.ln_ffn = LayerNorm(cfg.d)
        self.ffn = FeedForward(cfg.d, cfg.ffn_mult, rng)

    def self_part(self, x: Tensor) -> Tensor:
        return x + self.self_attn(self.ln_self(x))

    def cross_part(self, x: Tensor, other: Tensor) -> Tensor:
        x = x + self.cross_attn(self.ln_cross(x), self.ln_context(other))
        return x + self.ffn(self.ln_ffn(x))


class FusionBlock(Module):
    """Two-channel block. With ``last=True`` the vision channel stops after
    self-attention: its cross/FFN output would never be read downstream."""

    def __init__(self, cfg: BridgeConfig, rng, last: bool = False):
        self.vision = FusionChannel(cfg, rng, cross=not last)
        self.text = FusionChannel(cfg, rng)

    def __call__(self, vision_states: Tensor, text_states: Tensor) -> tuple[Tensor, Tensor]:
        if vision_states.shape[-1] != text_states.shape[-1]:
            raise T.ShapeError(
                f"fusion_block: channel widths differ {vision_states.shape} vs {text_states.shape}"
            )
        v = self.vision.self_part(vision_states)
        t = self.text.self_part(text_states)
        # both channels read the other's same-block post-self-attention states
        v_out = self.vision.cross_part(v, t) if self.vision.has_cross else v
        return v_out, self.text.cross_part(t, v)

    def zero_cross_output(self) -> None:
        for ch in (self.vision, self.text):
            if not ch.has_cross:
                continue
            ch.cross_attn.out.weight.data[...] = 0.0
            ch.cross_attn.out.bias.data[...] = 0.0


class FusionBridge(Module):
    def __init__(self, cfg: BridgeConfig, rng):
        self.cfg = cfg
        self.patch = PatchEmbed(cfg, rng)
        self.queries = QueryBank(cfg, rng)
        self.blocks = [FusionBlock(cfg, rng, last=i == cfg.num_blocks - 1) for i in range(cfg.num_blocks)]
        self.ln_out = LayerNorm(cfg.d)
        self._resamplers: dict[int, Tensor] = {}

    def set_image_size(self, size: int) -> None:
        self.cfg = self.cfg.with_image_size(size)

    def _positions(self) -> Tensor:
        g = self.cfg.grid
        if g == self.cfg.pos_grid:
            return self.patch.pos
        if g not in self._resamplers:
            self._resamplers[g] = Tensor(position_resampler(self.cfg.pos_grid, g))
        return self._resamplers[g] @ self.patch.pos

    def embed_image(self, image) -> Tensor:
        image = np.asarray(image, dtype=np.float64)
        cfg = self.cfg
        want = (cfg.image_size, cfg.image_size, cfg.channels)
        if image.shape != want:
            raise ConfigError(f"image shape {image.shape} does not match config {want}")
        x = self.patch.proj(Tensor(patchify(image, cfg.patch_size)))
        if cfg.pos_embed:
            x = x + self._positions()
        return x

    def __call__(self, image) -> Tensor:
        v = self.embed_image(image)
        t = self.queries.states()
        for block in self.blocks:
            v, t = block(v, t)
        return self.ln_out(t)


class Projection(Module):
    """Affine map from bridge width d to decoder width d_lm (no activation)."""

    def __init__(self, cfg: BridgeConfig, rng):
        self.proj = Linear(cfg.d, cfg.d_lm, rng, bias=cfg.proj_bias, std=cfg.init_std)

    def __call__(self, z: Tensor) -> Tensor:
        return self.proj(z)


# ---------------------------------------------------------------------------
# desk-scale images


def synth_image(image_id: str, size: int, channels: int = 3) -> np.ndarray:
    """Procedural image keyed by id, sampled at any resolution.

    A sum of a few oriented sinusoidal gratings plus a coloured blob, with
    parameters drawn from a hash of the id, so the same id rendered at 16 and
    32 pixels is the same picture at two resolutions. Values lie in [0, 1].
    """
    seed = int.from_bytes(hashlib.sha256(image_id.encode()).digest()[:8], "little")
    rng = np.random.default_rng(seed)
    coords = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    img = np.zeros((size, size, channels))
    for c in range(channels):
        acc = np.zeros((size, size))
        for _ in range(3):
            fx, fy = rng.uniform(-4, 4, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            acc += rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
        cx, cy, r = rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.1, 0.3)
        acc += 2.0 * rng.uniform(-1, 1) * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * r * r))
        img[..., c] = acc
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)


def load_bridge_config(path) -> BridgeConfig:
    with open(path) as f:
        return BridgeConfig.from_dict(json.load(f))
