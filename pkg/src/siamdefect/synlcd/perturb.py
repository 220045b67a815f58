"""Global photometric perturbations: contrast/brightness, RGB offset and ISO-style noise."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BIAS_RANGE = (1, 6)
ALPHAS = tuple(round(k / 10, 1) for k in range(5, 16))
NOISE_LEVELS = tuple(round(k / 10, 1) for k in range(1, 11))
DEVIATIONS = tuple(range(3, 34, 3))

# Noise variance at strength s and intensity I is s^2 * (NOISE_GAIN * I + NOISE_READ^2).
NOISE_GAIN = 0.25
NOISE_READ = 4.0


@dataclass(frozen=True)
class Perturbation:
    brightness_bias: int = 0
    contrast_alpha: float = 1.0
    iso_noise: float = 0.0
    rgb_deviation: int = 0
    rgb_offset: tuple = (0, 0, 0)
    noise_seed: int = 0

    def violations(self) -> list[str]:
        """Out-of-range fields; neutral values (0 bias, 0 noise, 0 deviation) are allowed."""
        out = []
        if not 0 <= self.brightness_bias <= BIAS_RANGE[1]:
            out.append(f"brightness_bias {self.brightness_bias} outside [0, {BIAS_RANGE[1]}]")
        if not ALPHAS[0] <= self.contrast_alpha <= ALPHAS[-1]:
            out.append(f"contrast_alpha {self.contrast_alpha} outside [{ALPHAS[0]}, {ALPHAS[-1]}]")
        if not 0 <= self.iso_noise <= 1:
            out.append(f"iso_noise {self.iso_noise} outside [0, 1]")
        if not 0 <= self.rgb_deviation <= DEVIATIONS[-1]:
            out.append(f"rgb_deviation {self.rgb_deviation} outside [0, {DEVIATIONS[-1]}]")
        if len(self.rgb_offset) != 3 or any(abs(o) > self.rgb_deviation for o in self.rgb_offset):
            out.append(f"rgb_offset {self.rgb_offset} exceeds rgb_deviation {self.rgb_deviation}")
        return out

    def in_table_ranges(self) -> bool:
        """True when every field sits on the generation grid (not merely the accepted range)."""
        return (
            BIAS_RANGE[0] <= self.brightness_bias <= BIAS_RANGE[1]
            and self.contrast_alpha in ALPHAS
            and self.iso_noise in NOISE_LEVELS
            and self.rgb_deviation in DEVIATIONS
            and not self.violations()
        )


def sample_perturbation(rng: np.random.Generator) -> Perturbation:
    dev = DEVIATIONS[int(rng.integers(len(DEVIATIONS)))]
    return Perturbation(
        brightness_bias=int(rng.integers(BIAS_RANGE[0], BIAS_RANGE[1] + 1)),
        contrast_alpha=ALPHAS[int(rng.integers(len(ALPHAS)))],
        iso_noise=NOISE_LEVELS[int(rng.integers(len(NOISE_LEVELS)))],
        rgb_deviation=dev,
        rgb_offset=tuple(int(o) for o in rng.integers(-dev, dev + 1, size=3)),
        noise_seed=int(rng.integers(2**31)),
    )


def noise_variance(intensity, strength: float):
    return strength ** 2 * (NOISE_GAIN * np.asarray(intensity, dtype=np.float64) + NOISE_READ ** 2)


def apply_perturbations(image: np.ndarray, p: Perturbation) -> np.ndarray:
    """clip(alpha * image + bias) + per-channel offset + signal-dependent noise, clipped to [0, 255].

    Returns float64; callers round to uint8 when writing images.
    """
    if hasattr(p, "perturbation"):
        p = p.perturbation
    bad = p.violations()
    if bad:
        raise ValueError("; ".join(bad))
    img = np.asarray(image, dtype=np.float64)
    out = np.clip(p.contrast_alpha * img + p.brightness_bias, 0, 255)
    if img.ndim == 3:
        out = out + np.asarray(p.rgb_offset, dtype=np.float64)
    if p.iso_noise > 0:
        rng = np.random.default_rng(p.noise_seed)
        base = np.clip(out, 0, 255)
        out = out + rng.standard_normal(out.shape) * np.sqrt(noise_variance(base, p.iso_noise))
    return np.clip(out, 0, 255)
