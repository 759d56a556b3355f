"""Command line entry point: ``headavatar {synth,train,reenact,eval}``.

Configs are JSON objects matching the subcommand's config dataclass; any
subset of keys may be given. ``--set a.b=value`` overrides a key after the
file is read, and the value is parsed as JSON when it can be.

Exit status: 0 on success, 1 on a domain error (bad data, invalid config
values, corrupt checkpoint), 2 on a usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .backbones import build_surrogate, load_backbone
from .config import apply_overrides, from_dict, read_json, to_dict, write_json
from .dataio import FRAME_DIR, SynthConfig, load_dataset, read_raster, synthesize_dataset
from .errors import AvatarError, FormatError, IntegrityError
from .metrics import evaluate
from .reenactor import MODES, reenact
from .trainer import TrainConfig, train

EFFECTIVE_CONFIG = "effective-config.json"


class UsageError(Exception):
    pass


def _base_config(path: Optional[str], cls) -> dict:
    data = to_dict(cls())
    if path is None:
        return data
    try:
        given = read_json(path)
    except FileNotFoundError as exc:
        raise FormatError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(given, dict):
        raise FormatError(f"config {path} must hold a JSON object")
    _merge(data, given, path)
    return data


def _merge(base: dict, extra: dict, source: str, prefix: str = "") -> None:
    for k, v in extra.items():
        if k not in base:
            raise UsageError(f"unknown config key {prefix + k!r} in {source}")
        if isinstance(v, dict) and isinstance(base[k], dict) and base[k]:
            _merge(base[k], v, source, f"{prefix}{k}.")
        else:
            base[k] = v


def _resolve(args, cls, **forced):
    """Default config <- file <- --set overrides <- explicit flags."""
    data = _base_config(args.config, cls)
    try:
        apply_overrides(data, args.overrides)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from exc
    if args.seed is not None and "seed" in data:
        data["seed"] = args.seed
    data.update(forced)
    return from_dict(cls, data)


def _write_effective(out: Path, args, config, **extra) -> None:
    out.mkdir(parents=True, exist_ok=True)
    record = {
        "subcommand": args.command,
        "config_file": args.config,
        "overrides": list(args.overrides),
        "seed": getattr(config, "seed", args.seed),
        "config": to_dict(config),
        **extra,
    }
    write_json(out / EFFECTIVE_CONFIG, record)


def cmd_synth(args) -> None:
    cfg = _resolve(args, SynthConfig)
    cfg.validate()
    out = Path(args.out)
    _write_effective(out, args, cfg)
    manifest = synthesize_dataset(cfg, out)
    print(f"wrote {manifest.frame_count} frames at {manifest.resolution}px to {out}")


def cmd_train(args) -> None:
    forced = {"deterministic": True} if args.deterministic else {}
    cfg = _resolve(args, TrainConfig, **forced)
    cfg.validate()
    out = Path(args.out)
    _write_effective(out, args, cfg, data=args.data, resume=args.resume)
    manifest = train(args.data, cfg, out, resume_from=args.resume)
    print(f"step {manifest.step}: checkpoint {manifest.path} ({manifest.content_hash[:16]})")


def cmd_reenact(args) -> None:
    out = Path(args.out)
    _write_effective(out, args, {"mode": args.mode}, checkpoint=args.checkpoint,
                     driving=args.driving, background=args.background)
    background = read_raster(Path(args.background), 3) if args.background else None
    report = reenact(args.checkpoint, args.driving, mode=args.mode, out=out, background=background)
    print(f"{report.frame_count} frames, {report.fps:.1f} fps "
          f"(p95 latency {report.p95_latency_ms:.1f} ms) -> {out}")


def _prediction_frames(pred: Path) -> dict[int, Path]:
    frames = {}
    for p in sorted((pred / FRAME_DIR).glob("*_avatar.png")):
        frames[int(p.name.split("_")[0])] = p
    if not frames:
        raise IntegrityError(f"no *_avatar.png frames under {pred / FRAME_DIR}")
    return frames


def cmd_eval(args) -> None:
    pred_dir = Path(args.pred)
    out = Path(args.out) if args.out else pred_dir / "eval"
    _write_effective(out, args, {}, pred=args.pred, ref=args.ref, backbone=args.backbone)
    frames = _prediction_frames(pred_dir)
    _, refs = load_dataset(args.ref, optional=("mask",))
    by_id = {s.frame_id: s for s in refs}
    missing = sorted(set(frames) - set(by_id))
    if missing:
        raise IntegrityError(f"predicted frames without reference: {missing[:5]}")
    preds = [read_raster(frames[i], 3) for i in sorted(frames)]
    reals = [by_id[i].real_image for i in sorted(frames)]
    if any(r is None for r in reals):
        raise IntegrityError("reference dataset lacks real frames")
    backbone = load_backbone(args.backbone) if args.backbone else build_surrogate()
    report = evaluate(preds, reals, backbone)
    write_json(out / "report.json", report.to_json())
    fid = "n/a" if report.fid is None else f"{report.fid:.4f}"
    print(f"SSIM {report.ssim:.4f}  PSNR {report.psnr_db:.2f} dB  "
          f"perceptual {report.perceptual:.4f}  FID {fid}  ({report.frame_count} frames)")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--deterministic", action="store_true",
                        help="bit-reproducible execution (single thread)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, repeatable")

    parser = argparse.ArgumentParser(prog="headavatar", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic tracked clip")
    p.set_defaults(func=cmd_synth, out_required=True)

    p = sub.add_parser("train", parents=[common], help="train an avatar on a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train, out_required=True)

    p = sub.add_parser("reenact", parents=[common], help="drive a trained avatar")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--driving", required=True, help="dataset directory with render/uv frames")
    p.add_argument("--mode", choices=MODES, default="self")
    p.add_argument("--background", help="RGB PNG to composite the avatar onto")
    p.set_defaults(func=cmd_reenact, out_required=True)

    p = sub.add_parser("eval", parents=[common], help="score predicted frames against references")
    p.add_argument("--pred", required=True, help="reenact output directory")
    p.add_argument("--ref", required=True, help="dataset directory with real frames")
    p.add_argument("--backbone", help="backbone weights archive (default: built-in surrogate)")
    p.set_defaults(func=cmd_eval, out_required=False)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    if args.out_required and not args.out:
        parser.error(f"{args.command}: --out is required")
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 2
    except (AvatarError, ValueError, TypeError, OSError) as exc:
        msg = " ".join(str(exc).split())
        print(f"{parser.prog} {args.command}: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
