"""Dynamic multi-window self-attention.

Queries come from every visible token. Keys and values are first summarised
inside each patch by strided convolutions at several window sizes; every
query then attends to the window descriptors of all visible patches, one
branch per window size. Branch outputs are summed and projected.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .layers import MLP, Conv2d, LayerNorm, Linear, Module
from .tensor import Tensor


def window_set(p: int, include_full: bool = True, include_unit: bool = False) -> list[int]:
    """Kernel sizes ``p, p/2, ..., 2`` for a patch grid of side ``p``.

    ``include_full`` toggles ``k = p`` and ``include_unit`` adds ``k = 1``.
    A grid of side 1 always yields ``[1]``.
    """
    if p < 1 or p & (p - 1):
        raise ConfigError(f"patch grid side must be a power of two, got {p}")
    if p == 1:
        return [1]
    ks = []
    k = p
    while k >= 2:
        if k != p or include_full:
            ks.append(k)
        k //= 2
    if include_unit:
        ks.append(1)
    if not ks:
        raise ConfigError(f"window flags leave no kernel sizes for p={p}")
    return ks


def tokens_to_maps(x: Tensor, p: int) -> Tensor:
    """(B, v*p*p, C) patch-major tokens -> (B*v, C, p, p) per-patch maps."""
    B, L, C = x.shape
    if L % (p * p):
        raise ConfigError(f"{L} tokens is not a whole number of {p}x{p} patches")
    v = L // (p * p)
    return x.reshape(B, v, p, p, C).transpose(0, 1, 4, 2, 3).reshape(B * v, C, p, p)


def maps_to_tokens(m: Tensor, batch: int) -> Tensor:
    """(B*v, C, q, q) -> (B, v*q*q, C)."""
    Bv, C, q, _ = m.shape
    v = Bv // batch
    return m.reshape(batch, v, C, q * q).transpose(0, 1, 3, 2).reshape(batch, v * q * q, C)


def split_heads(x: Tensor, heads: int) -> Tensor:
    B, L, C = x.shape
    return x.reshape(B, L, heads, C // heads).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    B, h, L, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, h * d)


def attention_probs(q: Tensor, k: Tensor, heads: int) -> Tensor:
    """(B, heads, Lq, Lk) softmax weights, scale 1/sqrt(C/heads)."""
    C = q.shape[-1]
    if C % heads:
        raise ConfigError(f"channels {C} not divisible by heads {heads}")
    scores = (split_heads(q, heads) @ split_heads(k, heads).swapaxes(-1, -2)) * (1.0 / math.sqrt(C // heads))
    return T.softmax(scores, axis=-1)


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention on (B, L, C) inputs."""
    return merge_heads(attention_probs(q, k, heads) @ split_heads(v, heads))


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return x.reshape(1, *x.shape), True
    return x, False


def qkv_project(x: Tensor, w_q, w_k, w_v) -> tuple[Tensor, Tensor, Tensor]:
    """Plain projections. Each ``w_*`` is a :class:`Linear` or a (C, C) weight."""
    def proj(w):
        return w(x) if isinstance(w, Module) else x @ w

    return proj(w_q), proj(w_k), proj(w_v)


def branch_attention(q: Tensor, k: Tensor, v: Tensor, kernel: int, key_conv, value_conv, p: int, heads: int) -> Tensor:
    """One window branch.

    ``k`` and ``v`` are summarised per patch by ``kernel x kernel`` stride-``kernel``
    convolutions, giving ``(p/kernel)^2`` descriptors per visible patch. Every
    query attends to the descriptors of all visible patches.
    """
    if p % kernel:
        raise ConfigError(f"kernel {kernel} does not divide patch grid side {p}")
    q, squeeze = _batched(q)
    k, _ = _batched(k)
    v, _ = _batched(v)
    B = q.shape[0]
    k_desc = maps_to_tokens(key_conv(tokens_to_maps(k, p)), B)
    v_desc = maps_to_tokens(value_conv(tokens_to_maps(v, p)), B)
    out = attention(q, k_desc, v_desc, heads)
    return out.reshape(out.shape[1:]) if squeeze else out


class DMMSA(Module):
    def __init__(self, dim: int, heads: int, p: int, rng: np.random.Generator, dtype=np.float32,
                 include_full: bool = True, include_unit: bool = False, share_kv_conv: bool = True):
        if dim % heads:
            raise ConfigError(f"channels {dim} not divisible by heads {heads}")
        self.heads = heads
        self.p = p
        self.windows = window_set(p, include_full, include_unit)
        self.w_q = Linear(dim, dim, rng, dtype)
        self.w_k = Linear(dim, dim, rng, dtype)
        self.w_v = Linear(dim, dim, rng, dtype)
        self.key_convs = [Conv2d(dim, dim, k, rng, dtype=dtype) for k in self.windows]
        self.value_convs = None if share_kv_conv else [Conv2d(dim, dim, k, rng, dtype=dtype) for k in self.windows]
        self.w_out = Linear(dim, dim, rng, dtype)

    def branch_convs(self, i: int):
        kc = self.key_convs[i]
        return kc, (kc if self.value_convs is None else self.value_convs[i])

    def forward(self, x: Tensor) -> Tensor:
        x, squeeze = _batched(x)
        q, k, v = qkv_project(x, self.w_q, self.w_k, self.w_v)
        total: Optional[Tensor] = None
        for i, kernel in enumerate(self.windows):
            kc, vc = self.branch_convs(i)
            out = branch_attention(q, k, v, kernel, kc, vc, self.p, self.heads)
            total = out if total is None else total + out
        y = self.w_out(total)
        return y.reshape(y.shape[1:]) if squeeze else y


class GlobalAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        if dim % heads:
            raise ConfigError(f"channels {dim} not divisible by heads {heads}")
        self.heads = heads
        self.w_q = Linear(dim, dim, rng, dtype)
        self.w_k = Linear(dim, dim, rng, dtype)
        self.w_v = Linear(dim, dim, rng, dtype)
        self.w_out = Linear(dim, dim, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        x, squeeze = _batched(x)
        q, k, v = qkv_project(x, self.w_q, self.w_k, self.w_v)
        y = self.w_out(attention(q, k, v, self.heads))
        return y.reshape(y.shape[1:]) if squeeze else y


class Block(Module):
    """Pre-norm transformer block: ``t = x + attn(LN(x))``, ``out = t + MLP(LN(t))``."""

    def __init__(self, dim: int, attn: Module, rng: np.random.Generator, dtype=np.float32, mlp_ratio: int = 4):
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = attn
        self.norm2 = LayerNorm(dim, dtype)
        self.mlp = MLP(dim, dim * mlp_ratio, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        t = x + self.attn(self.norm1(x))
        return t + self.mlp(self.norm2(t))
