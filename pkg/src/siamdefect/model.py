"""The change-aware Siamese segmentation network."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .decoder import ChangeAwareDecoder
from .encoder import PyramidEncoder, init_weights
from .fusion import DifferenceFusion, align_concat, dist_map


@dataclass
class ModelOutput:
    logits: torch.Tensor  # (B, num_classes, H/4, W/4)
    distmap: torch.Tensor  # (B, H/4, W/4)
    pyramids: tuple | None = None


class ChangeAwareSiameseNet(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        self.encoder = PyramidEncoder(cfg)
        self.fusion = DifferenceFusion(cfg.stage_channels, cfg.decoder_channels)
        self.decoder = ChangeAwareDecoder(
            cfg.decoder_channels, cfg.num_classes, cfg.use_cad, cfg.attention_reduction
        )
        self.fusion.apply(init_weights)
        self.decoder.apply(init_weights)

    def branch(self, index: int) -> PyramidEncoder:
        """Encoder used by Siamese branch 0 (NG) or 1 (OK); both are the same module."""
        if index not in (0, 1):
            raise IndexError(index)
        return self.encoder

    def siamese_encode(self, ng: torch.Tensor, ok: torch.Tensor):
        if ng.shape != ok.shape:
            raise ValueError(f"NG and OK images differ in size: {tuple(ng.shape)} vs {tuple(ok.shape)}")
        return self.encoder(ng), self.encoder(ok)

    def forward(self, ng: torch.Tensor, ok: torch.Tensor, mode: str | None = None, keep_pyramids=False):
        mode = mode or self.cfg.mode
        png, pok = self.siamese_encode(ng, ok)
        distmap = dist_map(align_concat(png), align_concat(pok))
        fused = self.fusion(png, pok)
        logits = self.decoder(fused, distmap, mode)
        return ModelOutput(logits, distmap, (png, pok) if keep_pyramids else None)


def upsample_logits(logits: torch.Tensor, size) -> torch.Tensor:
    return F.interpolate(logits, size=tuple(size), mode="bilinear", align_corners=False)
