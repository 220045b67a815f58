"""Training loop, versioned checkpoints and the evaluation protocols."""
from __future__ import annotations

import hashlib
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import Config, config_from_dict, config_to_dict, validate_config
from .data import ImagePair, augment, collate, make_split, prepare
from .decoder import normalize_distmap
from .losses import total_loss
from .metrics import confusion, curve_counts, curves_from_counts, default_thresholds, scores
from .model import ChangeAwareSiameseNet, upsample_logits

CHECKPOINT_MAGIC = b"SIAMDEFECT-CKPT\n"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<IQ32s")
LOG_HEADER = "step,cel,bcl,total"
LINE, ABPT = 1, 2
PROTOCOL_NAMES = ("full", "LL", "AA", "LA", "AL", "label_fraction")
_CROSS = {"LL": ({LINE}, {LINE}), "AA": ({ABPT}, {ABPT}), "LA": ({LINE}, {ABPT}), "AL": ({ABPT}, {LINE})}


@dataclass(frozen=True)
class ProtocolSpec:
    name: str
    train_classes: frozenset
    test_classes: frozenset
    fraction: float = 1.0

    @property
    def out_of_class(self) -> bool:
        return not (self.train_classes & self.test_classes)

    @property
    def mode(self) -> str:
        """Decoder mode and loss switch used by this protocol."""
        return "out_of_class" if self.out_of_class else "intra_class"


def make_protocol(name: str, fraction: float = 1.0) -> ProtocolSpec:
    if name in _CROSS:
        train, test = _CROSS[name]
        return ProtocolSpec(name, frozenset(train), frozenset(test))
    if name == "full":
        return ProtocolSpec(name, frozenset({LINE, ABPT}), frozenset({LINE, ABPT}))
    if name == "label_fraction":
        if not 0 <= fraction <= 1:
            raise ValueError(f"label fraction must lie in [0, 1], got {fraction}")
        return ProtocolSpec(name, frozenset({LINE, ABPT}), frozenset({LINE, ABPT}), fraction)
    raise ValueError(f"unknown protocol {name!r}; expected one of {PROTOCOL_NAMES}")


def protocol_from_config(cfg: Config) -> ProtocolSpec:
    t = cfg.train
    if t.protocol == "cross_class":
        return make_protocol(t.cross_class)
    return make_protocol(t.protocol, t.label_fraction)


@dataclass
class Checkpoint:
    parameters: dict
    optimizer: dict | None
    iteration: int
    config: dict
    version: int = CHECKPOINT_VERSION


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list = field(default_factory=list)  # (step, cel, bcl, total)


class CheckpointError(ValueError):
    pass


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write ``magic | version | payload length | sha256 | payload`` to ``path``."""
    buf = io.BytesIO()
    torch.save({"parameters": ckpt.parameters, "optimizer": ckpt.optimizer,
                "iteration": ckpt.iteration, "config": ckpt.config}, buf)
    payload = buf.getvalue()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(_HEADER.pack(ckpt.version, len(payload), hashlib.sha256(payload).digest()))
        fh.write(payload)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    head = len(CHECKPOINT_MAGIC) + _HEADER.size
    if len(data) < head or not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"corrupt checkpoint {path}: bad or truncated header")
    version, length, digest = _HEADER.unpack_from(data, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version} does not match supported version {CHECKPOINT_VERSION}")
    payload = data[head:]
    if len(payload) != length or hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"corrupt checkpoint {path}: payload is truncated or altered")
    state = torch.load(io.BytesIO(payload), map_location="cpu", weights_only=True)
    return Checkpoint(state["parameters"], state["optimizer"], int(state["iteration"]), state["config"], version)


def build_model(cfg: Config, seed: int | None = None) -> ChangeAwareSiameseNet:
    """Construct the network with parameters initialised from ``seed`` (default: ``cfg.train.seed``)."""
    torch.manual_seed(cfg.train.seed if seed is None else seed)
    return ChangeAwareSiameseNet(cfg.model)


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[ChangeAwareSiameseNet, Config]:
    cfg = config_from_dict(ckpt.config)
    model = ChangeAwareSiameseNet(cfg.model)
    model.load_state_dict(ckpt.parameters)
    return model, cfg


def learning_rate(step: int, cfg: Config) -> float:
    """Polynomial decay over the iteration budget with a linear warmup (warmup starts at ``warmup_ratio``)."""
    t = cfg.train
    lr = t.lr * (1 - step / max(t.iterations, 1)) ** t.poly_power
    if step < t.warmup_iters:
        k = (1 - step / t.warmup_iters) * (1 - t.warmup_ratio)
        lr *= 1 - k
    return lr


def make_optimizer(model, cfg: Config) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=cfg.train.lr, weight_decay=cfg.train.weight_decay)


def set_deterministic(enabled: bool) -> None:
    torch.use_deterministic_algorithms(enabled)
    torch.backends.cudnn.benchmark = not enabled


def training_subset(pairs, protocol: ProtocolSpec, seed: int) -> list[ImagePair]:
    """Pairs usable under ``protocol``: defect classes within the training classes, then the labeled subset."""
    usable = [p for p in pairs if p.classes() <= protocol.train_classes]
    if protocol.fraction < 1:
        ids = [p.meta.get("sample_id", str(i)) for i, p in enumerate(usable)]
        plan = make_split(ids, protocol.fraction, seed)
        usable = [p for p, i in zip(usable, ids) if i in plan.labeled_ids]
    return usable


def _batch(pairs, step: int, cfg: Config):
    rng = np.random.default_rng([cfg.train.seed, step])
    idx = rng.choice(len(pairs), size=cfg.train.batch_size, replace=len(pairs) < cfg.train.batch_size)
    return collate([augment(pairs[i], rng, cfg.train) for i in idx])


def _append_log(path, rows, fresh: bool) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w" if fresh else "a") as fh:
        if fresh:
            fh.write(LOG_HEADER + "\n")
        for row in rows:
            fh.write(f"{row[0]},{row[1]!r},{row[2]!r},{row[3]!r}\n")


def read_log(path) -> list[tuple]:
    rows = []
    with open(path) as fh:
        next(fh)
        for line in fh:
            s, c, b, t = line.strip().split(",")
            rows.append((int(s), float(c), float(b), float(t)))
    return rows


def train(model: ChangeAwareSiameseNet, pairs, cfg: Config, protocol: ProtocolSpec | None = None, *,
          resume: Checkpoint | None = None, stop_at: int | None = None, log_path=None,
          device: str = "cpu", progress=None) -> TrainResult:
    """Optimize ``model`` for ``cfg.train.iterations`` steps (or until ``stop_at``).

    Every step draws its batch and augmentation from a generator seeded by
    ``(cfg.train.seed, step)``, so a run resumed from a checkpoint follows
    the same trajectory as an uninterrupted one. The loss history is
    returned and, when ``log_path`` is given, appended to a CSV log.
    """
    validate_config(cfg)
    protocol = protocol or protocol_from_config(cfg)
    set_deterministic(cfg.train.deterministic)
    usable = training_subset(pairs, protocol, cfg.train.seed)
    if not usable and cfg.train.iterations > 0:
        raise ValueError(f"no labeled training pairs for protocol {protocol.name}")
    model.to(device).train()
    optimizer = make_optimizer(model, cfg)
    start = 0
    if resume is not None:
        model.load_state_dict(resume.parameters)
        if resume.optimizer is not None:
            optimizer.load_state_dict(resume.optimizer)
        start = resume.iteration
    end = cfg.train.iterations if stop_at is None else min(stop_at, cfg.train.iterations)
    history = []
    for step in range(start, end):
        ng, ok, mask = (t.to(device) for t in _batch(usable, step, cfg))
        for group in optimizer.param_groups:
            group["lr"] = learning_rate(step, cfg)
        out = model(ng, ok, mode=protocol.mode)
        losses = total_loss(out.logits, out.distmap, mask, protocol.mode, cfg.loss)
        values = losses.as_floats()
        if not all(math.isfinite(v) for v in values.values()):
            raise FloatingPointError(
                f"non-finite loss at step {step}: cel={values['cel']}, bcl={values['bcl']}, total={values['total']}")
        optimizer.zero_grad(set_to_none=True)
        losses.total.backward()
        optimizer.step()
        history.append((step, values["cel"], values["bcl"], values["total"]))
        if progress is not None:
            progress(step, values)
    if log_path is not None:
        _append_log(log_path, history, fresh=resume is None)
    ckpt = Checkpoint(
        {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        optimizer.state_dict(), end if end > start else start, config_to_dict(cfg),
    )
    return TrainResult(ckpt, history)


@torch.no_grad()
def predict(model: ChangeAwareSiameseNet, pair: ImagePair, cfg: Config, mode: str | None = None,
            device: str = "cpu"):
    """Class probabilities and normalized DistMap at the pair's mask resolution.

    Returns (probs (C, H, W), distmap (H, W)) as numpy arrays.
    """
    model.to(device).eval()
    p = prepare(pair, cfg.train)
    ng, ok, _ = collate([p])
    out = model(ng.to(device), ok.to(device), mode=mode)
    size = pair.mask.shape
    probs = torch.softmax(upsample_logits(out.logits, size), dim=1)[0]
    d = normalize_distmap(out.distmap)[:, None]
    d = F.interpolate(d, size=size, mode="bilinear", align_corners=False)[0, 0].clamp(0, 1)
    return probs.cpu().numpy(), d.cpu().numpy()


def evaluate(model: ChangeAwareSiameseNet, pairs, protocol: ProtocolSpec, cfg: Config,
             device: str = "cpu", thresholds=None, keep_predictions: bool = False) -> dict:
    """Score ``model`` on ``pairs`` under ``protocol``.

    Intra-class protocols score the arg-max class map over all classes.
    Out-of-class protocols binarize the normalized DistMap over a threshold
    sweep and report the best-F threshold and the fixed 0.5 threshold.
    """
    allowed = set(protocol.test_classes) | {0}
    num_classes = cfg.model.num_classes
    thresholds = default_thresholds() if thresholds is None else np.asarray(thresholds)
    total = np.zeros((num_classes, num_classes), dtype=np.int64)
    counts = np.zeros((len(thresholds), 3), dtype=np.int64)
    pixels = 0
    predictions = []
    for pair in pairs:
        extra = set(np.unique(pair.mask).tolist()) - allowed
        if extra:
            raise ValueError(f"class ids {sorted(extra)} in {pair.meta.get('sample_id', '?')} "
                             f"are outside the {protocol.name} test classes {sorted(protocol.test_classes)}")
        probs, dmap = predict(model, pair, cfg, protocol.mode, device)
        pixels += pair.mask.size
        if protocol.out_of_class:
            counts += curve_counts(dmap, pair.mask, thresholds)
            pred = dmap
        else:
            pred = probs.argmax(0)
            total += confusion(pred, pair.mask, num_classes)
            counts += curve_counts(1 - probs[0], pair.mask, thresholds)
        if keep_predictions:
            predictions.append(pred)
    curve = curves_from_counts(counts, thresholds)
    best = int(np.argmax(curve[:, 3]))
    half = int(np.argmin(np.abs(thresholds - 0.5)))
    tp, fp, fn = counts[best]
    report = {
        "protocol": protocol.name,
        "mode": protocol.mode,
        "num_pairs": len(pairs),
        "best_threshold": float(thresholds[best]),
        "best_fscore": float(curve[best, 3]),
        "best_iou": float(tp / (tp + fp + fn)) if tp + fp + fn else 0.0,
        "iou_at_0.5": float(counts[half, 0] / max(counts[half].sum(), 1)),
        "curve": curve.tolist(),
    }
    if not protocol.out_of_class:
        s = scores(total)
        report.update(confusion=total.tolist(), **{k: s[k] for k in ("mIoU", "mAcc", "aAcc", "mFscore")},
                      per_class=s["per_class"], valid=s["valid"])
    else:
        binary = np.array([[pixels - tp - fp - fn, fp], [fn, tp]], dtype=np.int64)
        s = scores(binary)
        report.update(confusion=binary.tolist(), **{k: s[k] for k in ("mIoU", "mAcc", "mFscore")},
                      per_class=s["per_class"])
    if keep_predictions:
        report["predictions"] = predictions
    return report
