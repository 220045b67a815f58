"""Hierarchical transformer encoder with sequence-reduction attention (SRA).

Keys and values are shortened by a ratio ``R`` before attention: the
``N x C`` sequence is reshaped to ``N/R x C*R`` (R consecutive tokens are
stacked) and linearly projected back to ``C`` channels. ``R = 1`` is plain
multi-head scaled dot-product attention.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import INPUT_DIVISOR, ModelConfig


def reduce_sequence(x: torch.Tensor, ratio: int, linear: nn.Module | None) -> torch.Tensor:
    """(B, N, C) -> (B, N/R, C) by stacking R consecutive tokens and projecting."""
    if ratio == 1:
        return x
    b, n, c = x.shape
    if n % ratio:
        raise ValueError(f"sequence length {n} is not divisible by reduction ratio {ratio}")
    if linear is None:
        raise ValueError("a reduction layer is required when ratio > 1")
    return linear(x.reshape(b, n // ratio, c * ratio))


def multihead_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int) -> torch.Tensor:
    """softmax(Q K^T / sqrt(d)) V with channels split into ``heads`` groups of size d."""
    b, n, c = q.shape
    if k.shape[-1] != c or v.shape[-1] != c:
        raise ValueError(f"channel mismatch: q has {c}, k has {k.shape[-1]}, v has {v.shape[-1]}")
    if c % heads:
        raise ValueError(f"{heads} heads do not divide {c} channels")
    d = c // heads
    m = k.shape[1]
    q = q.reshape(b, n, heads, d).transpose(1, 2)
    k = k.reshape(b, m, heads, d).transpose(1, 2)
    v = v.reshape(b, m, heads, d).transpose(1, 2)
    attn = (q @ k.transpose(-2, -1)) / math.sqrt(d)
    out = attn.softmax(dim=-1) @ v
    return out.transpose(1, 2).reshape(b, n, c)


def sra_attention(q, k, v, ratio: int, heads: int, reduce_k=None, reduce_v=None) -> torch.Tensor:
    """Attention of ``q`` over the R-reduced key/value sequences.

    ``q``, ``k``, ``v`` are projected (B, N, C) tensors (a leading batch axis
    may be omitted). ``reduce_k``/``reduce_v`` map C*R -> C.
    """
    squeeze = q.dim() == 2
    if squeeze:
        q, k, v = q[None], k[None], v[None]
    if q.shape[-1] != k.shape[-1] or k.shape != v.shape:
        raise ValueError(f"shape mismatch: q {tuple(q.shape)}, k {tuple(k.shape)}, v {tuple(v.shape)}")
    k = reduce_sequence(k, ratio, reduce_k)
    v = reduce_sequence(v, ratio, reduce_v)
    out = multihead_attention(q, k, v, heads)
    return out[0] if squeeze else out


class SequenceReductionAttention(nn.Module):
    def __init__(self, dim: int, heads: int, ratio: int):
        super().__init__()
        self.heads = heads
        self.ratio = ratio
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        if ratio > 1:
            self.reduce_k = nn.Linear(dim * ratio, dim)
            self.reduce_v = nn.Linear(dim * ratio, dim)
        else:
            self.reduce_k = self.reduce_v = None
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, kv: torch.Tensor | None = None) -> torch.Tensor:
        kv = x if kv is None else kv
        out = sra_attention(
            self.q(x), self.k(kv), self.v(kv), self.ratio, self.heads, self.reduce_k, self.reduce_v
        )
        return self.proj(out)


class MixFFN(nn.Module):
    """Token MLP with a 3x3 depthwise convolution between the two linear layers."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.dwconv = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor, h: int, w: int) -> torch.Tensor:
        x = self.fc1(x)
        b, n, c = x.shape
        x = self.dwconv(x.transpose(1, 2).reshape(b, c, h, w)).flatten(2).transpose(1, 2)
        return self.fc2(F.gelu(x))


class SRABlock(nn.Module):
    def __init__(self, dim: int, heads: int, ratio: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SequenceReductionAttention(dim, heads, ratio)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MixFFN(dim, int(round(dim * mlp_ratio)))

    def forward(self, x: torch.Tensor, h: int, w: int) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x), h, w)


class PatchEmbed(nn.Module):
    """Overlapping strided convolution followed by LayerNorm."""

    def __init__(self, in_ch: int, dim: int, kernel: int, stride: int):
        super().__init__()
        self.proj = nn.Conv2d(in_ch, dim, kernel, stride=stride, padding=kernel // 2)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor):
        x = self.proj(x)
        _, _, h, w = x.shape
        return self.norm(x.flatten(2).transpose(1, 2)), h, w


EMBED_KERNELS = (7, 3, 3, 3)
EMBED_STRIDES = (4, 2, 2, 2)


class PyramidEncoder(nn.Module):
    """Four-stage encoder producing feature maps at strides 4, 8, 16 and 32."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        chans = [cfg.in_channels, *cfg.stage_channels]
        self.embeds = nn.ModuleList(
            PatchEmbed(chans[i], chans[i + 1], EMBED_KERNELS[i], EMBED_STRIDES[i]) for i in range(4)
        )
        self.stages = nn.ModuleList(
            nn.ModuleList(
                SRABlock(c, cfg.stage_heads[i], cfg.reduction_ratios[i], cfg.mlp_ratio)
                for _ in range(cfg.stage_depths[i])
            )
            for i, c in enumerate(cfg.stage_channels)
        )
        self.norms = nn.ModuleList(nn.LayerNorm(c) for c in cfg.stage_channels)
        self.apply(init_weights)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        h, w = x.shape[-2:]
        if h % INPUT_DIVISOR or w % INPUT_DIVISOR:
            raise ValueError(f"input size {h}x{w} is not divisible by {INPUT_DIVISOR}")
        feats = []
        for embed, blocks, norm in zip(self.embeds, self.stages, self.norms):
            x, h, w = embed(x)
            for blk in blocks:
                x = blk(x, h, w)
            x = norm(x)
            x = x.transpose(1, 2).reshape(x.shape[0], -1, h, w)
            feats.append(x)
        return feats


def init_weights(m: nn.Module) -> None:
    if isinstance(m, (nn.Linear, nn.Conv2d)):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


def receptive_field(kernels, strides) -> tuple[int, int]:
    """Receptive field size and jump of a stack of convolutions."""
    rf, jump = 1, 1
    for k, s in zip(kernels, strides):
        rf += (k - 1) * jump
        jump *= s
    return rf, jump
