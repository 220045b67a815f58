"""Contrastive, class-balanced contrastive and cross-entropy losses."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .config import LossConfig


class NoChangePixels(ValueError):
    """The label has no defect pixels, so balance factors are undefined."""


@dataclass
class LossBreakdown:
    cel: torch.Tensor
    bcl: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("cel", "bcl", "total")}


def contrastive_pointwise(d, y, cfg: LossConfig = LossConfig()):
    """Per-pixel contrastive term.

    Unchanged pixels (``y == 0``) pay ``d - tau_ok`` (clamped at 0 unless
    ``cfg.clamp_unchanged_at_zero`` is off); changed pixels pay the hinge
    ``max(0, tau_ng - d)``.
    """
    d = torch.as_tensor(d)
    y = torch.as_tensor(y, device=d.device)
    unchanged = d - cfg.tau_ok
    if cfg.clamp_unchanged_at_zero:
        unchanged = unchanged.clamp(min=0)
    changed = (cfg.tau_ng - d).clamp(min=0)
    return torch.where(y > 0, changed, unchanged)


def class_counts(label: torch.Tensor) -> dict[int, int]:
    ids, counts = torch.unique(torch.as_tensor(label), return_counts=True)
    return {int(i): int(n) for i, n in zip(ids, counts) if int(i) > 0}


def balance_factors(label) -> dict[int, float]:
    """B_p = (sum_q n_q) / n_p over the defect classes present (background excluded)."""
    counts = class_counts(label)
    return balance_from_counts(counts)


def balance_from_counts(counts: dict) -> dict:
    counts = {k: v for k, v in counts.items() if v > 0}
    if not counts:
        raise NoChangePixels("label contains no change pixels")
    total = sum(counts.values())
    return {k: total / n for k, n in counts.items()}


def align_label(label: torch.Tensor, size) -> torch.Tensor:
    """Nearest-neighbour resize of an integer label map (B, H, W) to ``size``."""
    if tuple(label.shape[-2:]) == tuple(size):
        return label
    resized = F.interpolate(label[:, None].float(), size=tuple(size), mode="nearest")
    return resized[:, 0].to(label.dtype)


def pixel_weights(label: torch.Tensor, balanced: bool = True) -> torch.Tensor:
    weights = torch.ones(label.shape, dtype=torch.float64)
    if not balanced:
        return weights
    try:
        factors = balance_factors(label)
    except NoChangePixels:
        return weights
    for cls, b in factors.items():
        weights[label == cls] = b
    return weights


def balanced_contrastive_loss(d: torch.Tensor, label: torch.Tensor, cfg: LossConfig = LossConfig(),
                              balanced: bool = True) -> torch.Tensor:
    """Mean over pixels of w(p) * CL(d(p), 1[y(p) > 0]).

    ``w`` is 1 on background and the batch balance factor B_y on defect pixels.
    ``balanced=False`` gives the plain contrastive loss. ``d`` is (B, h, w);
    ``label`` is (B, H, W) and is nearest-resized to ``d``.
    """
    if d.dim() == 2:
        d, label = d[None], label[None]
    label = align_label(torch.as_tensor(label), d.shape[-2:])
    if label.shape != d.shape:
        raise ValueError(f"label {tuple(label.shape)} is not aligned with distance map {tuple(d.shape)}")
    cl = contrastive_pointwise(d, label, cfg)
    w = pixel_weights(label, balanced).to(dtype=d.dtype, device=d.device)
    return (w * cl).mean()


def cross_entropy_loss(logits: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of -log softmax(logits)[y]; logits (B, C, H, W), label (B, H, W)."""
    c = logits.shape[1]
    if label.min() < 0 or label.max() >= c:
        raise ValueError(f"label values must lie in [0, {c}), got [{int(label.min())}, {int(label.max())}]")
    if logits.shape[-2:] != label.shape[-2:]:
        raise ValueError(f"logits {tuple(logits.shape)} are not aligned with label {tuple(label.shape)}")
    return F.cross_entropy(logits, label.long())


def combine_losses(cel, bcl, protocol: str, cfg: LossConfig = LossConfig()) -> LossBreakdown:
    """lambda1 * CEL + lambda2 * BCL for intra-class training, BCL alone for out-of-class."""
    cel, bcl = torch.as_tensor(cel), torch.as_tensor(bcl)
    if protocol == "out_of_class":
        return LossBreakdown(cel, bcl, bcl)
    if protocol != "intra_class":
        raise ValueError(f"unknown protocol {protocol!r}")
    return LossBreakdown(cel, bcl, cfg.lambda1 * cel + cfg.lambda2 * bcl)


def total_loss(logits, d, label, protocol: str, cfg: LossConfig = LossConfig()) -> LossBreakdown:
    """Protocol-dependent training loss; ``protocol`` is ``"intra_class"`` or ``"out_of_class"``.

    Logits are upsampled to the label resolution for the cross-entropy term.
    With ``cfg.contrastive == "none"`` the contrastive term is zero.
    """
    if cfg.contrastive == "none":
        bcl = d.new_zeros(())
    else:
        bcl = balanced_contrastive_loss(d, label, cfg, balanced=cfg.contrastive == "bcl")
    if protocol == "out_of_class":
        # the classifier is not part of the graph under this protocol
        return combine_losses(logits.new_zeros(()), bcl, protocol, cfg)
    if logits.shape[-2:] != label.shape[-2:]:
        logits = F.interpolate(logits, size=label.shape[-2:], mode="bilinear", align_corners=False)
    return combine_losses(cross_entropy_loss(logits, label), bcl, protocol, cfg)
