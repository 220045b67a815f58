"""Command-line entry points: synth, train, eval, infer and report."""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import cv2
import numpy as np

from .config import Config, ConfigError, apply_overrides, config_to_dict, load_config, save_config, validate_config
from .data import ImagePair, load_pairs
from .metrics import error_map, write_curves
from .trainer import (
    CheckpointError, build_model, evaluate, load_checkpoint, model_from_checkpoint, predict,
    protocol_from_config, save_checkpoint, train,
)

SYNTH_KEYS = ("train.seed", "train.input_size")
REPORT_FIELDS = ("run", "protocol", "mIoU", "mAcc", "aAcc", "mFscore", "best_iou", "best_threshold")


def _key_listing(keys=None) -> str:
    flat = {f"{s}.{k}": v for s, section in config_to_dict(Config()).items() for k, v in section.items()}
    keys = keys or list(flat)
    return "config keys (set with --set key=value):\n" + "\n".join(f"  {k} (default {flat[k]})" for k in keys)


def _common(p: argparse.ArgumentParser, out_default: str) -> None:
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. train.iterations=300 (repeatable)")
    p.add_argument("--out", default=out_default, help=f"output directory (default {out_default})")
    p.add_argument("--seed", type=int, help="shorthand for --set train.seed=N")
    p.add_argument("--device", default="cpu", help="torch device (default cpu)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="siamdefect", description="Siamese display-defect segmentation.")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.RawDescriptionHelpFormatter

    p = sub.add_parser("synth", help="synthesize a defect dataset", formatter_class=fmt,
                       epilog=_key_listing(list(SYNTH_KEYS)))
    _common(p, "synlcd")
    p.add_argument("--patterns", help="directory of clean pattern images (default: the ten built-in patterns)")
    p.add_argument("--count", type=int, default=2, help="samples per defect type and pattern (default 2)")
    p.add_argument("--clean", type=int, default=0, help="defect-free samples per pattern (default 0)")
    p.add_argument("--types", nargs="+", default=["line", "abpt", "mixed"], choices=["line", "abpt", "mixed"])
    p.add_argument("--perturb-reference", action="store_true",
                   help="also perturb the OK reference with independent draws")

    p = sub.add_parser("train", help="train a model", formatter_class=fmt, epilog=_key_listing())
    _common(p, "run")
    p.add_argument("--data", required=True, help="dataset root with train/{ng,ok,mask}")
    p.add_argument("--split", default="train")
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("eval", help="evaluate a checkpoint", formatter_class=fmt, epilog=_key_listing())
    _common(p, "eval")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset root with <split>/{ng,ok,mask}")
    p.add_argument("--split", default="test")

    p = sub.add_parser("infer", help="predict masks and DistMaps for NG/OK pairs", formatter_class=fmt,
                       epilog=_key_listing())
    _common(p, "infer")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pair", nargs=2, action="append", required=True, metavar=("NG", "OK"),
                   help="an NG image and its OK reference (repeatable)")

    p = sub.add_parser("report", help="tabulate eval reports across runs", formatter_class=fmt)
    p.add_argument("runs", nargs="+", help="eval output directories containing report.json")
    p.add_argument("--out", default="report", help="output directory (default report)")
    return parser


def resolve_config(args, base: Config | None = None) -> Config:
    cfg = load_config(args.config) if getattr(args, "config", None) else (base or Config())
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    return validate_config(apply_overrides(cfg, overrides))


def cmd_synth(args) -> dict:
    from .synlcd import build_dataset, builtin_patterns, load_patterns

    cfg = resolve_config(args)
    if args.patterns:
        patterns = load_patterns(args.patterns)
    else:
        patterns = builtin_patterns(cfg.train.input_size)
    records = build_dataset(patterns, args.count, args.out, cfg.train.seed, clean_per_pattern=args.clean,
                            types=tuple(args.types), perturb_reference=args.perturb_reference)
    return {"samples": len(records), "out": str(args.out)}


def cmd_train(args) -> dict:
    cfg = resolve_config(args)
    out = Path(args.out)
    pairs = list(load_pairs(args.data, args.split, cfg.model.num_classes))
    model = build_model(cfg)
    resume = load_checkpoint(args.resume) if args.resume else None
    result = train(model, pairs, cfg, resume=resume, log_path=out / "loss_log.csv", device=args.device)
    save_checkpoint(result.checkpoint, out / "checkpoint.ckpt")
    save_config(cfg, out / "config.yaml")
    final = result.history[-1][3] if result.history else None
    return {"iterations": result.checkpoint.iteration, "final_loss": final, "out": str(out)}


def _load_model(args):
    ckpt = load_checkpoint(args.checkpoint)
    model, cfg = model_from_checkpoint(ckpt)
    return model, resolve_config(args, base=cfg)


def cmd_eval(args) -> dict:
    model, cfg = _load_model(args)
    protocol = protocol_from_config(cfg)
    pairs = [p for p in load_pairs(args.data, args.split, cfg.model.num_classes)
             if p.classes() <= protocol.test_classes]
    report = evaluate(model, pairs, protocol, cfg, device=args.device, keep_predictions=True)
    out = Path(args.out)
    (out / "error_maps").mkdir(parents=True, exist_ok=True)
    errors = {}
    for pair, pred in zip(pairs, report.pop("predictions")):
        binary = pred >= report["best_threshold"] if protocol.out_of_class else pred > 0
        img, err = error_map(binary, pair.mask)
        name = pair.meta["sample_id"]
        cv2.imwrite(str(out / "error_maps" / f"{name}.png"), cv2.cvtColor(img, cv2.COLOR_RGB2BGR))
        errors[name] = err
    write_curves(out / "curves.csv", report.pop("curve"))
    report["errors"] = errors
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    keys = ("mIoU", "mAcc", "mFscore", "best_iou")
    return {k: report[k] for k in keys if k in report}


def cmd_infer(args) -> dict:
    from .synlcd.patterns import read_rgb

    model, cfg = _load_model(args)
    mode = protocol_from_config(cfg).mode
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for ng_path, ok_path in args.pair:
        ng, ok = read_rgb(ng_path), read_rgb(ok_path)
        if ng.shape != ok.shape:
            raise ValueError(f"{ng_path} and {ok_path} differ in size")
        pair = ImagePair(ng, ok, np.zeros(ng.shape[:2], dtype=np.int64))
        probs, dmap = predict(model, pair, cfg, mode, args.device)
        stem = Path(ng_path).stem
        cv2.imwrite(str(out / f"{stem}_pred.png"), probs.argmax(0).astype(np.uint8))
        cv2.imwrite(str(out / f"{stem}_distmap.png"), np.round(dmap * 255).astype(np.uint8))
    return {"pairs": len(args.pair), "out": str(out)}


def cmd_report(args) -> dict:
    rows = []
    for run in args.runs:
        path = Path(run) / "report.json"
        if not path.exists():
            raise FileNotFoundError(f"missing report {path}")
        with open(path) as fh:
            rep = json.load(fh)
        rows.append({"run": str(run), **{k: rep.get(k, "") for k in REPORT_FIELDS[1:]}})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    width = max(len(r["run"]) for r in rows)
    print(f"{'run':<{width}}  " + "  ".join(f"{k:>9}" for k in REPORT_FIELDS[1:]))
    for r in rows:
        cells = [f"{r[k]:>9.4f}" if isinstance(r[k], float) else f"{r[k]!s:>9}" for k in REPORT_FIELDS[1:]]
        print(f"{r['run']:<{width}}  " + "  ".join(cells))
    return {"runs": len(rows), "out": str(out)}


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        summary = COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: config: {'; '.join(exc.violations)}", file=sys.stderr)
        return 1
    except (CheckpointError, FileNotFoundError, OSError, ValueError, FloatingPointError) as exc:
        kind = type(exc).__name__
        print(f"error: {kind}: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1
    print(json.dumps({"command": args.command, **summary}, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
