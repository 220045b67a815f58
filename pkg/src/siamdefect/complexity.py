"""Parameter counting and analytic FLOP estimates.

Convention: one multiply-accumulate is 2 FLOPs; element-wise gating
products count 1 FLOP each; softmax, normalization, activations, pooling and
interpolation are ignored.
"""
from __future__ import annotations

import torch.nn as nn

from .config import ModelConfig
from .encoder import EMBED_KERNELS, EMBED_STRIDES


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def matmul_flops(m: int, k: int, n: int) -> int:
    """FLOPs of an (m x k) @ (k x n) product."""
    return 2 * m * k * n


def flop_breakdown(cfg: ModelConfig, input_size) -> dict:
    """FLOPs of one Siamese forward pass, split into named parts.

    Keys: ``dense`` (convolutions and linear layers of both encoder branches),
    ``attention`` (QK^T and AV products of both branches), ``fusion``,
    ``cad`` and ``head``.
    """
    h, w = input_size
    cin = cfg.in_channels
    dense = attention = 0
    sizes = []
    for i, c in enumerate(cfg.stage_channels):
        s = EMBED_STRIDES[i]
        h, w = -(-h // s), -(-w // s)
        sizes.append((h, w))
        n = h * w
        k = EMBED_KERNELS[i]
        dense += matmul_flops(n, cin * k * k, c)
        r = cfg.reduction_ratios[i]
        m = n // r
        hidden = int(round(c * cfg.mlp_ratio))
        per_block = (
            4 * matmul_flops(n, c, c)  # q, k, v, output projection
            + (2 * matmul_flops(m, c * r, c) if r > 1 else 0)  # key/value reduction
            + matmul_flops(n, c, hidden) + matmul_flops(n, hidden, c)
            + 2 * n * hidden * 9  # depthwise 3x3
        )
        dense += cfg.stage_depths[i] * per_block
        heads = cfg.stage_heads[i]
        attention += cfg.stage_depths[i] * heads * 2 * matmul_flops(n, c // heads, m)
        cin = c

    d = cfg.decoder_channels
    h1, w1 = sizes[0]
    n1 = h1 * w1
    fusion = sum(matmul_flops(hh * ww, c, d) for (hh, ww), c in zip(sizes, cfg.stage_channels))
    fusion += matmul_flops(n1, 4 * d, d)

    cad = 0
    if cfg.use_cad:
        hid = max(1, d // cfg.attention_reduction)
        if cfg.mode == "intra_class":
            cad += matmul_flops(1, d, hid) + matmul_flops(1, hid, d)  # channel gate
            cad += matmul_flops(h1 + w1, d, hid)  # shared coordinate bottleneck
            cad += matmul_flops(h1, hid, d) + matmul_flops(w1, hid, d)
            cad += 4 * n1 * d  # distance-map addition and three gating products
        else:
            cad += matmul_flops(1, d, hid) + matmul_flops(1, hid, d)
            cad += 2 * n1 * d
    head = matmul_flops(n1, d, cfg.num_classes)
    return {
        "dense": 2 * dense,
        "attention": 2 * attention,
        "fusion": fusion,
        "cad": cad,
        "head": head,
    }


def estimate_flops(cfg: ModelConfig, input_size=(512, 512)) -> float:
    """GFLOPs of one Siamese forward pass at ``input_size`` (H, W)."""
    return sum(flop_breakdown(cfg, input_size).values()) / 1e9
