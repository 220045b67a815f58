"""Pyramid alignment, feature distance map and multi-stage difference fusion."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def _upsample(x: torch.Tensor, size) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def align_concat(pyramid: list[torch.Tensor]) -> torch.Tensor:
    """Upsample every stage to stage-1 resolution and concatenate channels (stage 1 first)."""
    size = pyramid[0].shape[-2:]
    return torch.cat([_upsample(f, size) for f in pyramid], dim=1)


def dist_map(f_ng: torch.Tensor, f_ok: torch.Tensor) -> torch.Tensor:
    """Per-pixel L2 norm of the channel difference: (B, C, H, W) x2 -> (B, H, W)."""
    if f_ng.shape != f_ok.shape:
        raise ValueError(f"shape mismatch: {tuple(f_ng.shape)} vs {tuple(f_ok.shape)}")
    return torch.linalg.vector_norm(f_ng - f_ok, ord=2, dim=1)


class DifferenceFusion(nn.Module):
    """Signed per-stage differences, projected to a common width and fused.

    Each stage difference ``f_ng - f_ok`` is projected by a 1x1 convolution,
    upsampled to stride 4, concatenated and mixed by a 1x1 fuse convolution.
    """

    def __init__(self, stage_channels, out_channels: int):
        super().__init__()
        self.projections = nn.ModuleList(nn.Conv2d(c, out_channels, 1) for c in stage_channels)
        self.fuse = nn.Conv2d(out_channels * len(stage_channels), out_channels, 1)

    def stage_differences(self, png, pok) -> list[torch.Tensor]:
        if len(png) != len(pok):
            raise ValueError("pyramids have different numbers of stages")
        diffs = []
        for a, b in zip(png, pok):
            if a.shape != b.shape:
                raise ValueError(f"stage shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
            diffs.append(a - b)
        return diffs

    def forward(self, png, pok) -> torch.Tensor:
        diffs = self.stage_differences(png, pok)
        size = diffs[0].shape[-2:]
        projected = [_upsample(proj(d), size) for proj, d in zip(self.projections, diffs)]
        return F.relu(self.fuse(torch.cat(projected, dim=1)))
