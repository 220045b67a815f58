"""Change-aware decoder: 3-axis attention driven by the feature distance map.

In intra-class mode the distance map is added to the fused difference before
channel/horizontal/vertical gating. In out-of-class mode the normalized
distance map replaces the two spatial gates and multiplies the features.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import MODES

NORM_EPS = 1e-6


def normalize_distmap(d: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """Per-image min-max normalization to [0, 1]; constant maps become all zeros."""
    flat = d.reshape(d.shape[0], -1)
    lo = flat.min(dim=1).values
    hi = flat.max(dim=1).values
    shape = (-1,) + (1,) * (d.dim() - 1)
    return (d - lo.view(shape)) / (hi - lo + eps).view(shape)


class ChannelAttention(nn.Module):
    def __init__(self, channels: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Conv2d(channels, hidden, 1)
        self.fc2 = nn.Conv2d(hidden, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pooled = x.mean(dim=(2, 3), keepdim=True)
        return torch.sigmoid(self.fc2(F.gelu(self.fc1(pooled))))


class CoordinateAttention(nn.Module):
    """Horizontal and vertical gates from axis-pooled profiles (shared bottleneck)."""

    def __init__(self, channels: int, hidden: int):
        super().__init__()
        self.reduce = nn.Conv2d(channels, hidden, 1)
        self.to_vertical = nn.Conv2d(hidden, channels, 1)
        self.to_horizontal = nn.Conv2d(hidden, channels, 1)

    def forward(self, x: torch.Tensor):
        _, _, h, w = x.shape
        rows = x.mean(dim=3, keepdim=True)  # (B, C, H, 1)
        cols = x.mean(dim=2, keepdim=True).transpose(2, 3)  # (B, C, W, 1)
        y = F.gelu(self.reduce(torch.cat([rows, cols], dim=2)))
        y_rows, y_cols = torch.split(y, [h, w], dim=2)
        horizontal = torch.sigmoid(self.to_horizontal(y_cols.transpose(2, 3)))  # (B, C, 1, W)
        vertical = torch.sigmoid(self.to_vertical(y_rows))  # (B, C, H, 1)
        return horizontal, vertical


class ChangeAttention(nn.Module):
    def __init__(self, channels: int, reduction: int = 2):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.channel = ChannelAttention(channels, hidden)
        self.coord = CoordinateAttention(channels, hidden)

    def weights(self, x: torch.Tensor):
        """Channel, horizontal and vertical gates for ``x`` (all in (0, 1))."""
        horizontal, vertical = self.coord(x)
        return self.channel(x), horizontal, vertical

    def forward(self, x: torch.Tensor, d: torch.Tensor, mode: str = "intra_class") -> torch.Tensor:
        d = _as_map(d, x)
        if mode == "intra_class":
            x = x + d
            ca, ha, va = self.weights(x)
            return ca * ha * va * x
        if mode == "out_of_class":
            return self.channel(x) * normalize_distmap(d) * x
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")


def _as_map(d: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    if d.dim() == 3:
        d = d.unsqueeze(1)
    if d.shape[0] != x.shape[0] or d.shape[1] != 1 or d.shape[-2:] != x.shape[-2:]:
        raise ValueError(f"distance map {tuple(d.shape)} is not aligned with features {tuple(x.shape)}")
    return d


class ChangeAwareDecoder(nn.Module):
    """Optional change attention followed by a pointwise classifier.

    With ``use_cad=False`` this is the plain head: the classifier is applied
    to the fused difference directly and the distance map is ignored.
    """

    def __init__(self, channels: int, num_classes: int, use_cad: bool = True, reduction: int = 2):
        super().__init__()
        self.attention = ChangeAttention(channels, reduction) if use_cad else None
        self.classifier = nn.Conv2d(channels, num_classes, 1)

    def forward(self, x: torch.Tensor, d: torch.Tensor, mode: str = "intra_class") -> torch.Tensor:
        if self.attention is not None:
            x = self.attention(x, d, mode)
        return self.classifier(x)
