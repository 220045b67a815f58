"""Sample specification, NG/OK/mask synthesis and on-disk dataset building."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy.ndimage import gaussian_filter

from .defects import (
    COLORS, OPACITIES, WIDTH_RANGE, BlobDefect, LineDefect, render_defects, sample_blobs, sample_lines,
)
from .patterns import write_rgb
from .perturb import Perturbation, apply_perturbations, sample_perturbation
from .poisson import poisson_blend

DEFECT_TYPES = ("line", "abpt", "mixed")
SAMPLE_TYPES = DEFECT_TYPES + ("clean",)
BLUR_SIGMA = 1.0
LINE_AREAS = (1, 3)
ABPT_CLUSTERS = (2, 6)
TRAIN_FRACTION = 0.7
MANIFEST = "manifest.jsonl"


@dataclass(frozen=True)
class SynthesisSpec:
    """Every random choice behind one sample; rendering from it is deterministic."""

    seed: int
    defect_type: str
    line_areas: int = 0
    abpt_clusters: int = 0
    lines: tuple = ()
    blobs: tuple = ()
    perturbation: Perturbation = field(default_factory=Perturbation)
    reference_perturbation: Perturbation | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthesisSpec":
        ref = d.get("reference_perturbation")
        return cls(
            seed=int(d["seed"]),
            defect_type=d["defect_type"],
            line_areas=int(d["line_areas"]),
            abpt_clusters=int(d["abpt_clusters"]),
            lines=tuple(LineDefect(**x) for x in d["lines"]),
            blobs=tuple(BlobDefect(**x) for x in d["blobs"]),
            perturbation=_perturbation(d["perturbation"]),
            reference_perturbation=None if ref is None else _perturbation(ref),
        )

    def violations(self) -> list[str]:
        """Attributes outside their generation ranges."""
        out = []
        if self.defect_type not in SAMPLE_TYPES:
            out.append(f"unknown defect_type {self.defect_type!r}")
        if len(self.lines) != self.line_areas:
            out.append(f"{len(self.lines)} lines for {self.line_areas} line areas")
        for d in self.lines + self.blobs:
            if d.color not in COLORS:
                out.append(f"colour {d.color!r} not in {tuple(COLORS)}")
            if d.opacity not in OPACITIES:
                out.append(f"opacity {d.opacity} not in {OPACITIES}")
            if not WIDTH_RANGE[0] <= d.width <= WIDTH_RANGE[1]:
                out.append(f"width {d.width} outside {WIDTH_RANGE}")
        for p in (self.perturbation, self.reference_perturbation):
            if p is not None and not p.in_table_ranges():
                out.append(f"perturbation {p} outside generation ranges")
        return out


def _perturbation(d: dict) -> Perturbation:
    return Perturbation(**{**d, "rgb_offset": tuple(d["rgb_offset"])})


@dataclass
class SynthSample:
    ng_image: np.ndarray  # (H, W, 3) uint8
    ok_image: np.ndarray  # (H, W, 3) uint8
    mask: np.ndarray  # (H, W) uint8 in {0, 1, 2}
    spec: SynthesisSpec


def sample_spec(pattern: np.ndarray, defect_type: str, seed: int, line_areas: int | None = None,
                abpt_clusters: int | None = None, perturb_reference: bool = False) -> SynthesisSpec:
    """Draw a spec for ``pattern`` from the generation ranges using ``seed``."""
    if defect_type not in SAMPLE_TYPES:
        raise ValueError(f"unknown defect_type {defect_type!r}; expected one of {SAMPLE_TYPES}")
    rng = np.random.default_rng(seed)
    lines, blobs, k, c = (), (), 0, 0
    if defect_type in ("line", "mixed"):
        k = int(rng.integers(LINE_AREAS[0], LINE_AREAS[1] + 1)) if line_areas is None else line_areas
        lines = tuple(sample_lines(pattern.shape, k, rng))
    if defect_type in ("abpt", "mixed"):
        c = int(rng.integers(ABPT_CLUSTERS[0], ABPT_CLUSTERS[1] + 1)) if abpt_clusters is None else abpt_clusters
        blobs = tuple(sample_blobs(pattern, c, rng))
    perturbation = sample_perturbation(rng)
    reference = sample_perturbation(rng) if perturb_reference else None
    return SynthesisSpec(int(seed), defect_type, k, c, lines, blobs, perturbation, reference)


def composite(clean: np.ndarray, layer) -> np.ndarray:
    """Alpha-composite a Gaussian-blurred defect layer over ``clean`` (float64)."""
    alpha = gaussian_filter(layer.alpha, BLUR_SIGMA, mode="nearest")
    colour = gaussian_filter(layer.premultiplied, (BLUR_SIGMA, BLUR_SIGMA, 0), mode="nearest")
    return clean.astype(np.float64) * (1 - alpha[..., None]) + colour


def blend_defects(clean: np.ndarray, lines=(), blobs=()):
    """Blurred defect layer Poisson-fused into ``clean``; returns (float image, mask).

    The fusion region is the hard defect geometry. Defects reaching the image
    border continue past it: the image is padded by one pixel whose values
    come from the composited source.
    """
    layer, mask = render_defects(clean.shape, lines, blobs)
    if not mask.any():
        return clean.astype(np.float64), mask
    source = composite(clean, layer)
    pad = ((1, 1), (1, 1), (0, 0))
    src = np.pad(source, pad, mode="edge")
    target = src.copy()
    target[1:-1, 1:-1] = clean
    region = np.pad(mask > 0, 1)
    return poisson_blend(src, target, region)[1:-1, 1:-1], mask


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(image), 0, 255).astype(np.uint8)


def synthesize_sample(pattern: np.ndarray, spec: SynthesisSpec) -> SynthSample:
    """Render the NG/OK/mask triplet described by ``spec`` over the clean ``pattern``."""
    pattern = np.asarray(pattern, dtype=np.uint8)
    if pattern.ndim != 3 or pattern.shape[2] != 3:
        raise ValueError(f"pattern must be an (H, W, 3) RGB image, got shape {pattern.shape}")
    fused, mask = blend_defects(pattern, spec.lines, spec.blobs)
    ng = to_uint8(apply_perturbations(fused, spec.perturbation))
    if spec.reference_perturbation is None:
        ok = pattern.copy()
    else:
        ok = to_uint8(apply_perturbations(pattern, spec.reference_perturbation))
    return SynthSample(ng, ok, mask, spec)


def sample_seed(seed: int, pattern_index: int, type_index: int, index: int) -> int:
    """Per-sample seed, independent of generation order."""
    return int(np.random.SeedSequence([seed, pattern_index, type_index, index]).generate_state(1)[0])


def split_patterns(pattern_ids) -> dict:
    """pattern id -> "train"/"test": the first round(0.7 n) patterns train (7 of 10), at least one."""
    ids = list(pattern_ids)
    n_train = max(1, int(round(TRAIN_FRACTION * len(ids))))
    return {pid: ("train" if i < n_train else "test") for i, pid in enumerate(ids)}


def plan_dataset(n_patterns: int, per_type_count: int, clean_per_pattern: int = 0,
                 types=DEFECT_TYPES) -> dict:
    """Sample counts per type plus the train/test pattern split sizes."""
    counts = {t: n_patterns * per_type_count for t in types}
    counts["clean"] = n_patterns * clean_per_pattern
    n_train = max(1, int(round(TRAIN_FRACTION * n_patterns))) if n_patterns else 0
    counts["train_patterns"] = n_train
    counts["test_patterns"] = n_patterns - n_train
    counts["total"] = sum(counts[t] for t in types) + counts["clean"]
    return counts


def build_dataset(patterns, per_type_count: int, out_dir, seed: int, clean_per_pattern: int = 0,
                  types=DEFECT_TYPES, perturb_reference: bool = False) -> list[dict]:
    """Synthesize and write a dataset; returns the manifest records.

    ``patterns`` is a mapping of pattern id to RGB image, or a sequence of
    images (ids ``p00``, ``p01``, ...). Files go to
    ``<out_dir>/<split>/{ng,ok,mask}/<pattern-id>_<type>_<index>.png`` and
    every spec is recorded in ``<out_dir>/manifest.jsonl``.
    """
    if not isinstance(patterns, dict):
        patterns = {f"p{i:02d}": p for i, p in enumerate(patterns)}
    if not patterns:
        raise ValueError("at least one pattern is required")
    for t in types:
        if t not in DEFECT_TYPES:
            raise ValueError(f"unknown defect type {t!r}")
    root = Path(out_dir)
    splits = split_patterns(patterns)
    try:
        for split in set(splits.values()):
            for sub in ("ng", "ok", "mask"):
                (root / split / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {root}: {exc}") from exc

    jobs = [(t, per_type_count) for t in types] + [("clean", clean_per_pattern)]
    records = []
    for p_idx, (pid, pattern) in enumerate(patterns.items()):
        pattern = np.asarray(pattern, dtype=np.uint8)
        for t, count in jobs:
            t_idx = SAMPLE_TYPES.index(t)
            for i in range(count):
                spec = sample_spec(pattern, t, sample_seed(seed, p_idx, t_idx, i),
                                   perturb_reference=perturb_reference)
                sample = synthesize_sample(pattern, spec)
                name = f"{pid}_{t}_{i:04d}.png"
                split = splits[pid]
                write_rgb(root / split / "ng" / name, sample.ng_image)
                write_rgb(root / split / "ok" / name, sample.ok_image)
                if not cv2.imwrite(str(root / split / "mask" / name), sample.mask):
                    raise OSError(f"cannot write mask {root / split / 'mask' / name}")
                records.append({"file": name, "split": split, "pattern_id": pid, "type": t,
                                "index": i, "spec": spec.to_dict()})
    with open(root / MANIFEST, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return records


def read_manifest(path) -> list[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
