"""Validated configuration for the model, losses and training loop.

Configs are frozen dataclasses. The on-disk format is YAML with one section
per dataclass (``model``, ``loss``, ``train``) whose keys are exactly the
field names; unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

MODES = ("intra_class", "out_of_class")
PROTOCOLS = ("full", "cross_class", "label_fraction")
CROSS_CLASS = ("LL", "AA", "LA", "AL")
CONTRASTIVE = ("none", "cl", "bcl")

# total stride of the four encoder stages
INPUT_DIVISOR = 32


class ConfigError(ValueError):
    """Raised with the complete list of violated invariants."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class ModelConfig:
    stage_channels: tuple[int, ...] = (32, 64, 160, 256)
    stage_depths: tuple[int, ...] = (2, 2, 2, 2)
    stage_heads: tuple[int, ...] = (1, 2, 5, 8)
    reduction_ratios: tuple[int, ...] = (8, 4, 2, 1)
    mlp_ratio: float = 4.0
    num_classes: int = 3
    decoder_channels: int = 256
    mode: str = "intra_class"
    use_cad: bool = True
    # bottleneck width of the decoder attention = decoder_channels // attention_reduction
    attention_reduction: int = 2
    in_channels: int = 3


@dataclass(frozen=True)
class LossConfig:
    tau_ok: float = 0.3
    tau_ng: float = 2.2
    lambda1: float = 1.0
    lambda2: float = 1.0
    clamp_unchanged_at_zero: bool = True
    # "none" = CEL only, "cl" = unbalanced contrastive, "bcl" = class-balanced
    contrastive: str = "bcl"


@dataclass(frozen=True)
class TrainConfig:
    input_size: tuple[int, int] = (512, 512)
    iterations: int = 126_000
    batch_size: int = 4
    label_fraction: float = 1.0
    protocol: str = "full"
    cross_class: str = "LL"
    seed: int = 0
    lr: float = 6e-5
    weight_decay: float = 0.01
    warmup_iters: int = 1500
    warmup_ratio: float = 1e-6
    poly_power: float = 1.0
    flip_prob: float = 0.5
    scale_range: tuple[float, float] = (1.0, 1.25)
    norm_mean: tuple[float, float, float] = (123.675, 116.28, 103.53)
    norm_std: tuple[float, float, float] = (58.395, 57.12, 57.375)
    deterministic: bool = True


@dataclass(frozen=True)
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


_SECTIONS = {"model": ModelConfig, "loss": LossConfig, "train": TrainConfig}


def _check_model(m: ModelConfig, input_size) -> list[str]:
    errors = []
    for name in ("stage_channels", "stage_depths", "stage_heads", "reduction_ratios"):
        value = getattr(m, name)
        if len(value) != 4:
            errors.append(f"model.{name} must have 4 entries, got {len(value)}")
        elif any(int(v) < 1 for v in value):
            errors.append(f"model.{name} entries must be positive")
    if not errors:
        for i, (c, h) in enumerate(zip(m.stage_channels, m.stage_heads)):
            if c % h:
                errors.append(f"model.stage_heads[{i}]={h} must divide stage_channels[{i}]={c}")
    if m.mlp_ratio <= 0:
        errors.append("model.mlp_ratio must be positive")
    if m.num_classes < 2:
        errors.append("model.num_classes must be >= 2 (background + one defect class)")
    if m.decoder_channels < 1:
        errors.append("model.decoder_channels must be positive")
    if m.mode not in MODES:
        errors.append(f"model.mode must be one of {MODES}, got {m.mode!r}")
    if m.attention_reduction < 1 or m.decoder_channels // max(m.attention_reduction, 1) < 1:
        errors.append("model.attention_reduction must leave a bottleneck of at least 1 channel")
    if m.in_channels < 1:
        errors.append("model.in_channels must be positive")

    if input_size is not None and len(m.reduction_ratios) == 4 and all(r >= 1 for r in m.reduction_ratios):
        h, w = input_size
        if h % INPUT_DIVISOR == 0 and w % INPUT_DIVISOR == 0:
            for i, r in enumerate(m.reduction_ratios):
                tokens = (h // (4 * 2**i)) * (w // (4 * 2**i))
                if tokens % r:
                    errors.append(
                        f"model.reduction_ratios[{i}]={r} does not divide the {tokens} tokens of stage {i + 1}"
                    )
    return errors


def _check_loss(loss: LossConfig) -> list[str]:
    errors = []
    if loss.tau_ok < 0 or loss.tau_ng < 0:
        errors.append("loss.tau_ok and loss.tau_ng must be non-negative")
    if not loss.tau_ng > loss.tau_ok:
        errors.append("tau_ng must exceed tau_ok")
    if loss.lambda1 < 0 or loss.lambda2 < 0:
        errors.append("loss.lambda1 and loss.lambda2 must be non-negative")
    if loss.contrastive not in CONTRASTIVE:
        errors.append(f"loss.contrastive must be one of {CONTRASTIVE}, got {loss.contrastive!r}")
    return errors


def _check_train(t: TrainConfig) -> list[str]:
    errors = []
    if len(t.input_size) != 2 or any(s < 1 for s in t.input_size):
        errors.append("train.input_size must be two positive integers")
    elif any(s % INPUT_DIVISOR for s in t.input_size):
        errors.append(f"train.input_size {tuple(t.input_size)} not divisible by {INPUT_DIVISOR}")
    if t.iterations < 0:
        errors.append("train.iterations must be >= 0")
    if t.batch_size < 1:
        errors.append("train.batch_size must be >= 1")
    if not 0.0 <= t.label_fraction <= 1.0:
        errors.append("train.label_fraction must lie in [0, 1]")
    if t.protocol not in PROTOCOLS:
        errors.append(f"train.protocol must be one of {PROTOCOLS}, got {t.protocol!r}")
    if t.cross_class not in CROSS_CLASS:
        errors.append(f"train.cross_class must be one of {CROSS_CLASS}, got {t.cross_class!r}")
    if t.lr <= 0:
        errors.append("train.lr must be positive")
    if t.warmup_iters < 0:
        errors.append("train.warmup_iters must be >= 0")
    if not 0.0 <= t.flip_prob <= 1.0:
        errors.append("train.flip_prob must lie in [0, 1]")
    if len(t.scale_range) != 2 or not 1.0 <= t.scale_range[0] <= t.scale_range[1]:
        errors.append("train.scale_range must be (lo, hi) with 1 <= lo <= hi")
    if len(t.norm_std) != 3 or any(s <= 0 for s in t.norm_std) or len(t.norm_mean) != 3:
        errors.append("train.norm_mean/norm_std must have 3 entries with positive std")
    return errors


def validate_config(cfg: Config) -> Config:
    """Return ``cfg`` unchanged if every invariant holds, else raise :class:`ConfigError`."""
    train_errors = _check_train(cfg.train)
    size = tuple(cfg.train.input_size) if not train_errors else None
    errors = _check_model(cfg.model, size) + _check_loss(cfg.loss) + train_errors
    if errors:
        raise ConfigError(errors)
    return cfg


def _scalar(value, like, key: str):
    """Coerce ``value`` to the type of the default ``like``; YAML may deliver numbers as strings."""
    if isinstance(like, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError([f"{key} must be a boolean, got {value!r}"])
    try:
        if isinstance(like, int):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError
            return int(value)
        if isinstance(like, float):
            if isinstance(value, bool):
                raise ValueError
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError([f"{key} must be a {type(like).__name__}, got {value!r}"]) from None
    if isinstance(like, str) and not isinstance(value, str):
        raise ConfigError([f"{key} must be a string, got {value!r}"])
    return value


def _coerce(cls, values: dict, section: str) -> Any:
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError([f"unknown key {section}.{k}" for k in unknown])
    defaults = cls()
    kwargs = {}
    for name, value in values.items():
        default = getattr(defaults, name)
        key = f"{section}.{name}"
        if isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError([f"{key} must be a list, got {value!r}"])
            value = tuple(_scalar(v, default[0], key) for v in value)
        else:
            value = _scalar(value, default, key)
        kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict | None) -> Config:
    data = data or {}
    unknown = sorted(set(data) - set(_SECTIONS))
    if unknown:
        raise ConfigError([f"unknown section {k}" for k in unknown])
    parts = {name: _coerce(cls, data.get(name) or {}, name) for name, cls in _SECTIONS.items()}
    return Config(**parts)


def config_to_dict(cfg: Config) -> dict:
    def plain(obj):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(obj).items()}

    return {name: plain(getattr(cfg, name)) for name in _SECTIONS}


def dump_config(cfg: Config) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def parse_config(text: str) -> Config:
    return config_from_dict(yaml.safe_load(text))


def load_config(path: str | Path) -> Config:
    return parse_config(Path(path).read_text())


def save_config(cfg: Config, path: str | Path) -> None:
    Path(path).write_text(dump_config(cfg))


def apply_overrides(cfg: Config, overrides: list[str]) -> Config:
    """Apply ``section.key=value`` overrides; values are parsed as YAML scalars/lists."""
    data = config_to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError([f"override {item!r} is not of the form key=value"])
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        if len(parts) != 2 or parts[0] not in data:
            raise ConfigError([f"override key {key!r} must be <section>.<field>"])
        section, name = parts
        if name not in data[section]:
            raise ConfigError([f"unknown key {section}.{name}"])
        data[section][name] = yaml.safe_load(raw)
    return config_from_dict(data)


def config_keys() -> list[str]:
    """All dotted keys accepted in config files and ``--set`` overrides."""
    return [f"{s}.{f.name}" for s, cls in _SECTIONS.items() for f in dataclasses.fields(cls)]
