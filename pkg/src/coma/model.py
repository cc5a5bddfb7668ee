"""DyViT: the four-stage hierarchical encoder and the reconstruction decoder.

Token layout used throughout is *patch-major*: the rows of one image patch
are contiguous and, inside a patch, ordered row-major over its ``p x p``
feature grid. Removing or reinserting a patch is therefore a block gather or
scatter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .dmmsa import DMMSA, Block, GlobalAttention, maps_to_tokens, tokens_to_maps
from .errors import ConfigError, InvariantError
from .layers import Conv2d, LayerNorm, Linear, Module, parameter
from .masking import TokenSet, apply_mask, reassemble
from .tensor import Tensor

SCALE_KERNEL = 7
SCALE_STRIDE = 4
# Symmetric padding 3 followed by floor division never visits the trailing
# pad rows, so (3 before, 0 after) gives the same output with exact division.
SCALE_PADDING = (3, 0)
# Encoder inputs are standardised from [0, 1]; reconstruction targets stay raw.
INPUT_MEAN = 0.5
INPUT_STD = 0.25


def sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    omega = np.arange(dim // 2, dtype=np.float64) / (dim / 2.0)
    omega = 1.0 / 10000 ** omega
    out = np.outer(pos.reshape(-1).astype(np.float64), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_2d(dim: int, rows: int, cols: int) -> np.ndarray:
    """Fixed 2-D sine/cosine table, (rows*cols, dim) in row-major grid order."""
    if dim % 4:
        raise ConfigError(f"2-D sinusoidal embedding needs dim divisible by 4, got {dim}")
    gy, gx = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    return np.concatenate([sincos_1d(dim // 2, gy), sincos_1d(dim // 2, gx)], axis=1)


def map_to_patch_tokens(x: Tensor, p: int) -> Tensor:
    """(B, C, H, W) feature map -> (B, n*p*p, C) patch-major tokens."""
    B, C, H, W = x.shape
    if H % p or W % p:
        raise ConfigError(f"feature map {H}x{W} is not divisible into {p}x{p} patches")
    gh, gw = H // p, W // p
    return x.reshape(B, C, gh, p, gw, p).transpose(0, 2, 4, 3, 5, 1).reshape(B, gh * gw * p * p, C)


def grid_to_patch_rows(table: np.ndarray, rows: int, cols: int, p: int) -> np.ndarray:
    """Reorder a row-major (rows*cols, C) table into patch-major order."""
    C = table.shape[-1]
    t = table.reshape(rows // p, p, cols // p, p, C).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(t.reshape(rows * cols, C))


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, 3, H, W) -> (B, n, patch*patch*3) with per-patch order (row, col, channel)."""
    B, C, H, W = images.shape
    g, h = H // patch, W // patch
    x = images.reshape(B, C, g, patch, h, patch).transpose(0, 2, 4, 3, 5, 1)
    return np.ascontiguousarray(x.reshape(B, g * h, patch * patch * C))


def unpatchify(tokens, patch: int, channels: int = 3):
    """Inverse of :func:`patchify`; works on arrays and tensors."""
    B, n, _ = tokens.shape
    g = int(round(n ** 0.5))
    if g * g != n:
        raise ConfigError(f"{n} patches do not form a square grid")
    x = tokens.reshape(B, g, g, patch, patch, channels).transpose(0, 5, 1, 3, 2, 4)
    return x.reshape(B, channels, g * patch, g * patch)


@dataclass
class StageOutputs:
    """Visible-token maps of the four stages plus the kept patch indices."""

    xs: list
    indices: np.ndarray
    grid_sides: tuple

    @property
    def n_visible(self) -> int:
        return self.indices.shape[-1]


class Stage(Module):
    def __init__(self, blocks: list):
        self.blocks = blocks

    def forward(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x)
        return x


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        C = cfg.channels
        self.scale = Conv2d(cfg.in_chans, C[0], SCALE_KERNEL, rng, stride=SCALE_STRIDE, padding=SCALE_PADDING, dtype=dtype)
        f = cfg.feature_size
        self.pos_embed = grid_to_patch_rows(sincos_2d(C[0], f, f), f, f, cfg.grid_sides[0]).astype(dtype)
        stages = []
        for i in range(4):
            blocks = []
            for _ in range(cfg.blocks[i]):
                if i < 2:
                    attn = DMMSA(C[i], cfg.heads[i], cfg.grid_sides[i], rng, dtype,
                                 cfg.include_full_window, cfg.include_unit_window, cfg.share_kv_conv)
                else:
                    attn = GlobalAttention(C[i], cfg.heads[i], rng, dtype)
                blocks.append(Block(C[i], attn, rng, dtype, cfg.mlp_ratio))
            stages.append(Stage(blocks))
        self.stages = stages
        self.downsamples = [Linear(C[i], C[i + 1], rng, dtype) for i in range(3)]
        p = cfg.grid_sides
        if cfg.fusion_mode == "cascade":
            self.fusion = [Conv2d(C[i], C[i + 1], 2, rng, dtype=dtype) for i in range(3)]
        else:
            self.fusion = [Conv2d(C[i], C[3], p[i], rng, dtype=dtype) for i in range(3)]

    def scale_embed(self, images: Tensor) -> Tensor:
        """Standardise, stride-4 7x7 convolution, patch-major tokens, plus the fixed positional table."""
        B, _, H, W = images.shape
        if H % 4 or W % 4:
            raise ConfigError(f"image extents {H}x{W} must be divisible by 4")
        fmap = self.scale((images - INPUT_MEAN) * (1.0 / INPUT_STD))
        tokens = map_to_patch_tokens(fmap, self.cfg.grid_sides[0])
        if tokens.shape[1] != self.pos_embed.shape[0]:
            raise ConfigError(f"image size {H}x{W} does not match configured image_size {self.cfg.image_size}")
        return tokens + self.pos_embed

    def downsample(self, i: int, x: Tensor) -> Tensor:
        """2x2 max pool inside each patch, then project channels C_i -> C_{i+1}."""
        p = self.cfg.grid_sides[i]
        if p % 2:
            raise ConfigError(f"cannot pool a patch grid of odd side {p}")
        B = x.shape[0]
        pooled = maps_to_tokens(T.maxpool2d(tokens_to_maps(x, p)), B)
        return self.downsamples[i](pooled)

    def forward(self, images: Tensor, mask: np.ndarray) -> StageOutputs:
        """Run the visible patches of ``images`` (adaptive ``mask``, (B, n)) through all stages."""
        mask = np.asarray(mask)
        if mask.ndim == 1:
            mask = np.broadcast_to(mask, (images.shape[0], mask.shape[0]))
        if mask.shape[1] != self.cfg.n_patches:
            raise ConfigError(f"mask covers {mask.shape[1]} patches, model expects {self.cfg.n_patches}")
        ts = apply_mask(self.scale_embed(images), mask, self.cfg.grid_sides[0])
        x = ts.tokens
        xs = []
        for i in range(4):
            x = self.stages[i](x)
            xs.append(x)
            if i < 3:
                x = self.downsample(i, x)
        return StageOutputs(xs, ts.indices, self.cfg.grid_sides)

    def positional_downsample(self, so: StageOutputs) -> Tensor:
        """Fuse the four stage outputs into one token per visible patch, (B, v, C4)."""
        p = so.grid_sides
        B = so.xs[0].shape[0]
        v = so.n_visible
        for x, pi in zip(so.xs, p):
            if x.shape[1] != v * pi * pi:
                raise InvariantError(f"stage rows {x.shape[1]} != v * p^2 = {v * pi * pi}")
        maps = [tokens_to_maps(x, pi) for x, pi in zip(so.xs, p)]
        if self.cfg.fusion_mode == "cascade":
            y = maps[0]
            for i in range(3):
                y = self.fusion[i](y) + maps[i + 1]
        else:
            y = maps[3]
            for i in range(3):
                y = y + self.fusion[i](maps[i])
        return y.reshape(B, v, self.cfg.channels[3])


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        C4 = cfg.channels[3]
        self.mask_token = parameter((rng.standard_normal(C4) * 0.02).astype(dtype))
        g = cfg.patches_per_side
        self.pos_embed = sincos_2d(C4, g, g).astype(dtype)
        self.embed = Linear(C4, cfg.decoder_width, rng, dtype)
        self.blocks = [
            Block(cfg.decoder_width, GlobalAttention(cfg.decoder_width, cfg.decoder_heads, rng, dtype), rng, dtype, cfg.mlp_ratio)
            for _ in range(cfg.decoder_depth)
        ]
        self.norm = LayerNorm(cfg.decoder_width, dtype)
        self.head = Linear(cfg.decoder_width, cfg.patch_size ** 2 * cfg.in_chans, rng, dtype)

    def reassemble(self, fused: Tensor, indices: np.ndarray) -> Tensor:
        ts = TokenSet(fused, indices, 1, self.cfg.n_patches)
        return reassemble(ts, self.mask_token, self.pos_embed)

    def forward_tokens(self, full: Tensor) -> Tensor:
        """(B, n, C4) reassembled sequence -> (B, n, patch^2 * 3) pixel predictions."""
        x = self.embed(full)
        for blk in self.blocks:
            x = blk(x)
        return self.head(self.norm(x))

    def forward(self, full: Tensor) -> Tensor:
        return unpatchify(self.forward_tokens(full), self.cfg.patch_size, self.cfg.in_chans)


class DyViT(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng, dtype)
        self.decoder = Decoder(cfg, rng, dtype)

    @property
    def dtype(self):
        return self.encoder.scale.weight.dtype

    def encode(self, images: Tensor, mask: np.ndarray) -> StageOutputs:
        return self.encoder(images, mask)

    def forward_tokens(self, images, mask: np.ndarray) -> Tensor:
        """Predict every patch of ``images`` from the patches kept by ``mask``, (B, n, P*P*3)."""
        if not isinstance(images, Tensor):
            images = Tensor(images, dtype=self.dtype)
        so = self.encoder(images, mask)
        fused = self.encoder.positional_downsample(so)
        return self.decoder.forward_tokens(self.decoder.reassemble(fused, so.indices))

    def forward(self, images, mask: np.ndarray) -> Tensor:
        return unpatchify(self.forward_tokens(images, mask), self.cfg.patch_size, self.cfg.in_chans)


def _block_params(C: int, mlp_ratio: int, attn: int) -> int:
    norms = 4 * C
    mlp = 2 * mlp_ratio * C * C + mlp_ratio * C + C
    return norms + mlp + attn


def _global_attn_params(C: int) -> int:
    return 4 * (C * C + C)


def _dmmsa_params(C: int, p: int, cfg: ModelConfig) -> int:
    from .dmmsa import window_set

    convs = sum(C * C * k * k + C for k in window_set(p, cfg.include_full_window, cfg.include_unit_window))
    return 4 * (C * C + C) + (1 if cfg.share_kv_conv else 2) * convs


def param_count(cfg: ModelConfig) -> int:
    """Encoder parameter count (scale conv, all stages, transitions, fusion), decoder excluded."""
    C = cfg.channels
    p = cfg.grid_sides
    total = cfg.in_chans * C[0] * SCALE_KERNEL ** 2 + C[0]
    for i in range(4):
        attn = _dmmsa_params(C[i], p[i], cfg) if i < 2 else _global_attn_params(C[i])
        total += cfg.blocks[i] * _block_params(C[i], cfg.mlp_ratio, attn)
    for i in range(3):
        total += C[i] * C[i + 1] + C[i + 1]
        if cfg.fusion_mode == "cascade":
            total += 4 * C[i] * C[i + 1] + C[i + 1]
        else:
            total += p[i] ** 2 * C[i] * C[3] + C[3]
    return total


def decoder_param_count(cfg: ModelConfig) -> int:
    W = cfg.decoder_width
    C4 = cfg.channels[3]
    total = C4 + C4 * W + W
    total += cfg.decoder_depth * _block_params(W, cfg.mlp_ratio, _global_attn_params(W))
    total += 2 * W + W * cfg.patch_size ** 2 * cfg.in_chans + cfg.patch_size ** 2 * cfg.in_chans
    return total
