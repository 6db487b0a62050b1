"""Command-line entry point: ``mist <gen-data|train|eval|infer|ablate|param-count>``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from mist.harness import config as config_mod
from mist.harness.config import KEY_TYPES, RunConfig
from mist.harness.data import gen_synthetic, load_dataset, save_dataset

# ablation switches; each maps onto a decoder config key
ABLATION_FLAGS = {
    "--attention-mixing": ("decoder.attention_mixing", ["on", "off"]),
    "--msa-projection": ("decoder.msa_projection", ["conv", "linear"]),
    "--dilations": ("decoder.dilations", None),
    "--aggregation": ("decoder.swc_aggregation", ["concat", "sum"]),
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    group = p.add_argument_group("config overrides")
    for key in KEY_TYPES:
        group.add_argument(f"--{key}", dest=f"cfg:{key}", metavar="VALUE")
    for flag, (key, choices) in ABLATION_FLAGS.items():
        group.add_argument(flag, dest=f"cfg:{key}", choices=choices, metavar="|".join(choices) if choices else "A,B")


def _config_from_args(args) -> RunConfig:
    cfg = config_mod.load(args.config) if args.config else RunConfig()
    overrides: Dict[str, str] = {
        k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:") and v is not None
    }
    return config_mod.with_overrides(cfg, overrides).validate()


def _cmd_gen_data(args) -> int:
    samples = gen_synthetic(args.seed, args.count, args.image_size, args.n_classes, args.shapes)
    save_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def _cmd_train(args) -> int:
    from mist.harness.train import train

    cfg = _config_from_args(args)
    out = Path(config_mod.output_dir(cfg))
    res = train(cfg, out, resume=args.resume,
                on_epoch=lambda r: print(f"epoch {r.epoch:3d}  loss {r.train_loss:.5f}  "
                                         f"val dice {r.val_dice:.4f}  hd95 {r.val_hd95:.3f}", flush=True))
    print(f"best val dice {res.best_dice:.4f} at epoch {res.best_epoch}; checkpoints in {out}")
    return 0


def _cmd_eval(args) -> int:
    from mist.harness.checkpoint import load
    from mist.harness.train import evaluate
    from mist.metrics import format_text

    samples = None
    if args.data:
        cfg = load(args.checkpoint).cfg
        samples = load_dataset(args.data, cfg.decoder.n_classes, cfg.image_size)
    summary = evaluate(args.checkpoint, samples, args.out, overlays=args.overlays)
    print(format_text(summary), end="")
    return 0


def _cmd_infer(args) -> int:
    from mist.harness.train import infer

    mask, ov = infer(args.checkpoint, args.image, args.out)
    print(f"wrote {mask} and {ov}")
    return 0


def _cmd_ablate(args) -> int:
    from mist.harness.train import ablate, format_ablation

    cfg = _config_from_args(args)
    out = Path(config_mod.output_dir(cfg))
    rows = ablate(cfg, out)
    print(format_ablation(rows), end="")
    return 0


def _cmd_param_count(args) -> int:
    from mist.decoder import DecoderConfig
    from mist.encoder import EncoderConfig
    from mist.harness.train import parameter_counts

    cfg = _config_from_args(args)
    if args.full_scale:
        cfg = RunConfig(encoder=EncoderConfig.full(), decoder=DecoderConfig(n_classes=cfg.decoder.n_classes), image_size=256)
    counts = parameter_counts(cfg)
    for proj in ("conv", "linear"):
        c = counts[proj]
        print(f"msa_projection={proj:<7} encoder {c['encoder']:>12,d}  decoder {c['decoder']:>14,d}  total {c['total']:>14,d}")
    print(f"conv projection uses {counts['reduction_percent']:.2f}% fewer parameters than linear")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mist", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset as PPM images + PGM class maps")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--count", type=int, default=80)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--n-classes", type=int, default=2)
    p.add_argument("--shapes", choices=["mixed", "disc", "rect"], default="mixed")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    _add_config_flags(p)
    p.add_argument("--resume", help="continue from a checkpoint (e.g. last.ckpt)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="image+mask directory (default: the checkpoint's validation split)")
    p.add_argument("--out", help="directory for report.txt / metrics.csv / overlays")
    p.add_argument("--overlays", type=int, default=0, help="write truth/prediction overlays for the first N cases")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("infer", help="segment one PPM image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("ablate", help="train all 16 ablation switch combinations")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("param-count", help="parameter totals for conv vs linear MSA projection")
    _add_config_flags(p)
    p.add_argument("--full-scale", action="store_true", help="use the full-scale 256x256 configuration")
    p.set_defaults(func=_cmd_param_count)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"mist: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
