"""NG/OK pair loading, joint augmentation and labeled-subset splits."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch

from .config import TrainConfig
from .synlcd.patterns import IMAGE_SUFFIXES, read_rgb

SUBDIRS = ("ng", "ok", "mask")


@dataclass
class ImagePair:
    ng: np.ndarray  # (H, W, 3) uint8, or float32 once normalized
    ok: np.ndarray
    mask: np.ndarray  # (H, W) integer class ids
    meta: dict = field(default_factory=dict)

    def classes(self) -> set[int]:
        return {int(c) for c in np.unique(self.mask) if c > 0}


@dataclass(frozen=True)
class SplitPlan:
    labeled_ids: frozenset
    unlabeled_ids: frozenset
    fraction: float


def parse_name(stem: str) -> dict:
    """Split ``<pattern-id>_<type>_<index>`` into its parts; other names map to themselves."""
    parts = stem.rsplit("_", 2)
    if len(parts) == 3:
        return {"pattern_id": parts[0], "type": parts[1], "sample_id": stem}
    return {"pattern_id": stem, "type": "unknown", "sample_id": stem}


def _ok_path(ok_dir: Path, name: str, pattern_id: str) -> Path:
    direct = ok_dir / name
    if direct.exists():
        return direct
    for suffix in IMAGE_SUFFIXES:
        candidate = ok_dir / f"{pattern_id}{suffix}"
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"missing OK reference for pattern {pattern_id!r} (looked for {direct})")


def read_mask(path) -> np.ndarray:
    mask = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if mask is None:
        raise FileNotFoundError(f"missing mask file {path}")
    if mask.ndim == 3:
        mask = mask[..., 0]
    return mask


def load_pairs(root, split: str, num_classes: int = 3):
    """Yield the pairs of ``<root>/<split>`` in filename order.

    Each NG image is paired with the OK image of the same filename, or else
    with ``ok/<pattern-id>.<ext>``, and with ``mask/<name>``.
    """
    base = Path(root) / split
    ng_dir = base / "ng"
    if not ng_dir.is_dir():
        raise FileNotFoundError(f"no NG directory at {ng_dir}")
    for ng_path in sorted(p for p in ng_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        meta = parse_name(ng_path.stem)
        ok_path = _ok_path(base / "ok", ng_path.name, meta["pattern_id"])
        mask_path = base / "mask" / ng_path.name
        if not mask_path.exists():
            mask_path = base / "mask" / f"{ng_path.stem}.png"
        ng, ok, mask = read_rgb(ng_path), read_rgb(ok_path), read_mask(mask_path)
        if not (ng.shape == ok.shape and ng.shape[:2] == mask.shape):
            raise ValueError(f"size mismatch for {ng_path.name}: ng {ng.shape}, ok {ok.shape}, mask {mask.shape}")
        if mask.max() >= num_classes:
            raise ValueError(f"mask {mask_path} has class id {int(mask.max())} >= num_classes {num_classes}")
        meta.update(split=split, path=str(ng_path))
        yield ImagePair(ng, ok, mask.astype(np.int64), meta)


def select_pairs(pairs, classes) -> list[ImagePair]:
    """Pairs whose defect classes are all in ``classes`` (defect-free pairs included)."""
    allowed = set(classes)
    return [p for p in pairs if p.classes() <= allowed]


def normalize(image: np.ndarray, mean, std) -> np.ndarray:
    return ((np.asarray(image, dtype=np.float32) - np.asarray(mean, np.float32)) / np.asarray(std, np.float32))


def _resize(pair: ImagePair, size) -> ImagePair:
    h, w = size
    if pair.mask.shape == (h, w):
        return pair
    return ImagePair(
        cv2.resize(pair.ng, (w, h), interpolation=cv2.INTER_LINEAR),
        cv2.resize(pair.ok, (w, h), interpolation=cv2.INTER_LINEAR),
        cv2.resize(pair.mask.astype(np.uint8), (w, h), interpolation=cv2.INTER_NEAREST).astype(pair.mask.dtype),
        pair.meta,
    )


def augment(pair: ImagePair, rng: np.random.Generator, cfg: TrainConfig = TrainConfig()) -> ImagePair:
    """Joint resize/scale-crop/flip of NG, OK and mask, then image normalization.

    Images are resized to ``cfg.input_size`` scaled by a factor drawn from
    ``cfg.scale_range`` and cropped back to ``cfg.input_size`` at a random
    offset; the mask uses nearest-neighbour resampling. A horizontal flip
    is applied with probability ``cfg.flip_prob``.
    """
    h, w = cfg.input_size
    s = float(rng.uniform(*cfg.scale_range))
    sh, sw = max(h, int(round(h * s))), max(w, int(round(w * s)))
    out = _resize(pair, (sh, sw))
    y0 = int(rng.integers(sh - h + 1))
    x0 = int(rng.integers(sw - w + 1))
    crop = (slice(y0, y0 + h), slice(x0, x0 + w))
    ng, ok, mask = out.ng[crop], out.ok[crop], out.mask[crop]
    if rng.random() < cfg.flip_prob:
        ng, ok, mask = ng[:, ::-1], ok[:, ::-1], mask[:, ::-1]
    return ImagePair(
        normalize(ng, cfg.norm_mean, cfg.norm_std),
        normalize(ok, cfg.norm_mean, cfg.norm_std),
        np.ascontiguousarray(mask),
        pair.meta,
    )


def prepare(pair: ImagePair, cfg: TrainConfig = TrainConfig()) -> ImagePair:
    """Evaluation-time preprocessing: resize images to the input size and normalize; the mask is kept."""
    h, w = cfg.input_size
    ng, ok = pair.ng, pair.ok
    if ng.shape[:2] != (h, w):
        ng = cv2.resize(ng, (w, h), interpolation=cv2.INTER_LINEAR)
        ok = cv2.resize(ok, (w, h), interpolation=cv2.INTER_LINEAR)
    return ImagePair(normalize(ng, cfg.norm_mean, cfg.norm_std), normalize(ok, cfg.norm_mean, cfg.norm_std),
                     pair.mask, pair.meta)


def to_tensor(image: np.ndarray) -> torch.Tensor:
    """(H, W, 3) array -> (3, H, W) float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.asarray(image, dtype=np.float32).transpose(2, 0, 1)))


def collate(pairs) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Stack normalized pairs into (ng, ok, mask) batch tensors."""
    ng = torch.stack([to_tensor(p.ng) for p in pairs])
    ok = torch.stack([to_tensor(p.ok) for p in pairs])
    mask = torch.stack([torch.from_numpy(np.asarray(p.mask, dtype=np.int64)) for p in pairs])
    return ng, ok, mask


def make_split(ids, fraction: float, seed: int) -> SplitPlan:
    """Seeded uniform choice of round(fraction * n) labeled ids without replacement."""
    if not 0 <= fraction <= 1:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    ids = sorted(ids)
    n_labeled = int(round(fraction * len(ids)))
    rng = np.random.default_rng(seed)
    chosen = rng.permutation(len(ids))[:n_labeled]
    labeled = frozenset(ids[i] for i in chosen)
    return SplitPlan(labeled, frozenset(ids) - labeled, fraction)
