"""Command-line entry point: ``attnsynth <subcommand> [--config c.json] [--set key=value ...]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline, train
from .config import ConfigError, load_config
from .data import generate_dataset, load_dataset
from .gradcheck import TOLERANCE, run_suite


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attnsynth", description="Attentional text-to-image GAN at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", help="render the synthetic captioned-shape dataset")
    _common(p)

    p = sub.add_parser("pretrain-damsm", help="pretrain text and image encoders on real pairs")
    _common(p)
    p.add_argument("--resume", action="store_true", help="continue from the run's encoder checkpoint")

    p = sub.add_parser("train", help="train the generator and discriminators")
    _common(p)
    p.add_argument("--encoders", help="encoder checkpoint (default: <out_dir>/damsm.ckpt)")

    p = sub.add_parser("eval", help="R-precision of generated test images (JSON on stdout)")
    _common(p)

    p = sub.add_parser("visualize", help="attention maps for captions")
    _common(p)
    p.add_argument("captions", nargs="+", help="space-separated caption, quoted")
    p.add_argument("--out", help="output directory (default: <out_dir>/attention)")

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("sweep", help="train and evaluate one run per lambda value")
    _common(p)
    p.add_argument("--lambdas", type=float, nargs="+", required=True)
    return parser


def _cfg(args):
    return load_config(args.config, args.overrides)


def cmd_gen_data(args) -> int:
    cfg = _cfg(args)
    root = generate_dataset(cfg.data_dir, cfg.seed, cfg.n_train, cfg.n_test, cfg.image_side)
    print(root)
    return 0


def cmd_pretrain(args) -> int:
    cfg = _cfg(args)
    data = pipeline.ensure_dataset(cfg)
    _, _, records = train.pretrain_damsm(cfg, data, cfg.out_dir, resume=args.resume)
    if records:
        print(json.dumps({"first": records[0]["loss_damsm"], "last": records[-1]["loss_damsm"]}))
    return 0


def cmd_train(args) -> int:
    cfg = _cfg(args)
    data = load_dataset(cfg.data_dir)
    _, _, records = train.train_gan(cfg, data, cfg.out_dir, args.encoders)
    print(json.dumps(records[-1], sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    cfg = _cfg(args)
    data = load_dataset(cfg.data_dir)
    print(pipeline.evaluate(cfg, data).to_json())
    return 0


def cmd_visualize(args) -> int:
    cfg = _cfg(args)
    data = load_dataset(cfg.data_dir)
    out = args.out or str(Path(cfg.out_dir) / "attention")
    for path in pipeline.visualize(cfg, data, args.captions, out):
        print(path)
    return 0


def cmd_grad_check(args) -> int:
    results = run_suite(args.seed)
    for r in results:
        print(f"{r.name:<22} max_rel_error={r.max_rel_error:.3e} {'ok' if r.passed else 'FAIL'} ({r.seconds:.2f}s)")
    worst = max(r.max_rel_error for r in results)
    print(f"tolerance {TOLERANCE:g}: {'PASS' if worst <= TOLERANCE else 'FAIL'}")
    return 0 if worst <= TOLERANCE else 1


def cmd_sweep(args) -> int:
    """One GAN run per lambda under <out_dir>/lambda_<value>, sharing the encoder checkpoint."""
    cfg = _cfg(args)
    data = pipeline.ensure_dataset(cfg)
    enc = Path(cfg.out_dir) / train.DAMSM_CKPT
    if not enc.exists():
        train.pretrain_damsm(cfg, data, cfg.out_dir)
    rows = []
    for lam in args.lambdas:
        run = replace(cfg, lambda_damsm=lam, out_dir=str(Path(cfg.out_dir) / f"lambda_{lam:g}"))
        run.validate()
        gen, _, _ = train.train_gan(run, data, run.out_dir, enc)
        text, image = train.load_encoders(run, len(data.vocab), enc)
        rep = pipeline.evaluate(run, data, models=(text, image, gen))
        rows.append({"lambda": lam, "r_precision": rep.mean, "half_width": rep.half_width})
        print(json.dumps(rows[-1]), flush=True)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-damsm": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "visualize": cmd_visualize,
    "grad-check": cmd_grad_check,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # usage errors exit 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, train.TrainingError, OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"attnsynth {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
