"""Command-line entry point.

    samdistill gen-data --out data/ [--config gen.yaml] [--override params.intensity=0.4]
    samdistill segment  --manifest data/train/manifest.json [--checkpoint run/last.pt] [--out masks/]
    samdistill train    --config train.yaml [--override lambda2=0] [--seed 1] [--out run/]
    samdistill eval     --checkpoint run/last.pt --manifest data/val/manifest.json --which student
    samdistill verify   [--which loss_oracles]

Exit codes: 0 success, 1 user error (bad flags, config or paths), 2 internal
error or a failed verification check.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .config import ConfigError, load_config, save_config
from .core.io import write_maskset
from .data import DegradationSpec, generate_dataset, load_clean_folder, load_manifest, make_splits
from .segmenter import CACHE_ENV, MissingMaskError, SegmenterConfig, make_segmenter
from .train import DTYPES, Checkpoint, PairedData, evaluate, load_student, restore, train

log = logging.getLogger("samdistill")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class DataGenConfig:
    kind: str = "rain"
    params: dict = field(default_factory=dict)
    seed: int = 0
    n_train: int = 200
    n_val: int = 32
    size: int = 64
    clean_dir: str | None = None

    def __post_init__(self):
        DegradationSpec(self.kind, dict(self.params), self.seed)  # validates kind and params
        if self.n_train < 1 or self.n_val < 1:
            raise ValueError("n_train and n_val must be >= 1")
        if self.size < 8 or self.size % 8:
            raise ValueError("size must be a multiple of 8, at least 8")


@dataclass
class SegmentConfig:
    segmenter: SegmenterConfig = field(default_factory=SegmenterConfig)
    dtype: str = "float32"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, config_required: bool = False) -> None:
    p.add_argument("--config", required=config_required, help="YAML config file")
    p.add_argument("--override", action="append", default=[], metavar="K=V", help="dotted config override (repeatable)")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="samdistill", description="Semantic-prior distillation for image restoration at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate synthetic train/val splits")
    _common(p)

    p = sub.add_parser("segment", help="precompute masks for every image in a manifest")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", help="segment this student's restored output instead of the lq image")

    p = sub.add_parser("train", help="train the student/teacher cascade")
    _common(p, config_required=True)

    p = sub.add_parser("eval", help="mean PSNR/SSIM of a checkpoint on a split")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", help="split to evaluate (default: the config's val_manifest)")
    p.add_argument("--which", choices=("student", "teacher"), default="student")

    p = sub.add_parser("verify", help="run the offline oracle/gradient/invariant checks")
    _common(p)
    p.add_argument("--which", action="append", help="run only the named check (repeatable)")
    return parser


def _overrides(args) -> list[str]:
    extra = [f"seed={args.seed}"] if args.seed is not None else []
    return list(args.override) + extra


def _out_dir(args, default_sub: str | None = None) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get(CACHE_ENV)
    if root and default_sub:
        return Path(root) / default_sub
    raise UsageError(f"--out is required (or set ${CACHE_ENV})")


def _print(obj) -> None:
    print(json.dumps(obj, indent=2))


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, _overrides(args), DataGenConfig)
    out = _out_dir(args, "data")
    spec = DegradationSpec(cfg.kind, dict(cfg.params), cfg.seed)
    if cfg.clean_dir:
        bases = load_clean_folder(cfg.clean_dir, cfg.size)
        splits = {
            "train": generate_dataset(bases, spec.with_seed(cfg.seed * 2), cfg.n_train, out / "train", "train"),
            "val": generate_dataset(bases, spec.with_seed(cfg.seed * 2 + 1), cfg.n_val, out / "val", "val"),
        }
    else:
        splits = make_splits(out, spec, cfg.n_train, cfg.n_val, cfg.size, cfg.seed)
    save_config(cfg, out / "effective_config.yaml")
    _print({name: {"manifest": str(m.root / "manifest.json"), "n": len(m)} for name, m in splits.items()})
    return EXIT_OK


def cmd_segment(args) -> int:
    cfg = load_config(args.config, _overrides(args), SegmentConfig)
    if cfg.segmenter.kind == "precomputed":
        raise ConfigError("segment needs a computing segmenter kind (grid or luminance), not 'precomputed'")
    manifest = load_manifest(args.manifest)
    out = _out_dir(args, "masks")
    dtype = DTYPES[cfg.dtype]
    data = PairedData.from_manifest(manifest, dtype)
    # an identity-initialized student returns lq unchanged, so lq stands in for its output
    images = data.lq
    if args.checkpoint:
        ckpt = Checkpoint.load(args.checkpoint)
        images = restore(load_student(ckpt), data.lq.to(DTYPES[ckpt.train_config.dtype]))
    seg = make_segmenter(cfg.segmenter)
    counts = []
    for img, sid in zip(images.to(torch.float64).numpy(), data.ids):
        masks = seg.segment(img, sid)
        write_maskset(out, sid, masks)
        counts.append(masks.n)
    save_config(cfg, out / "effective_config.yaml")
    _print({"out": str(out), "images": len(counts), "masks_per_image": sum(counts) / len(counts)})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    if args.out:
        cfg.checkpoint_dir = args.out
    log.info("run label: %s", cfg.label)
    print(cfg.to_yaml(), end="")
    ckpt = train(cfg)
    last = ckpt.history[-1] if ckpt.history else {}
    _print({"label": cfg.label, "step": ckpt.step, "checkpoint_dir": cfg.checkpoint_dir, "last": last})
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    manifest = args.manifest or ckpt.train_config.val_manifest
    if not manifest:
        raise UsageError("--manifest is required when the checkpoint config has no val_manifest")
    report = evaluate(ckpt, manifest, args.which)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"eval_{args.which}.json").write_text(json.dumps(report, indent=2))
    _print(report)
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import FAST_CHECKS, format_table, run_all

    checks = FAST_CHECKS
    if args.which:
        by_name = {c.__name__.removeprefix("check_"): c for c in FAST_CHECKS}
        unknown = sorted(set(args.which) - set(by_name))
        if unknown:
            raise UsageError(f"unknown checks {unknown}; choose from {sorted(by_name)}")
        checks = [by_name[n] for n in args.which]
    results = run_all(checks)
    table = format_table(results)
    print(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "verify.txt").write_text(table + "\n")
    return EXIT_OK if all(r.passed for r in results) else EXIT_INTERNAL


COMMANDS = {
    "gen-data": cmd_gen_data,
    "segment": cmd_segment,
    "train": cmd_train,
    "eval": cmd_eval,
    "verify": cmd_verify,
}


def run(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USER
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USER
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, MissingMaskError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception:
        log.exception("internal error")
        return EXIT_INTERNAL


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
