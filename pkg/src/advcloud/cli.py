"""Command-line driver: ``advcloud <subcommand> [--config F] [--seed N] [--size S] [--out DIR]``."""

from __future__ import annotations

import argparse
import logging
import sys

from advcloud import pipeline
from advcloud.config import PRESETS, ConfigError, apply_thread_limit, load_config
from advcloud.report import write_report

EXIT_MISSING = 2
EXIT_CONFIG = 3


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk",
                   help="base settings when no --config is given (default: desk)")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--size", type=int, help="square image size (overrides the config)")
    p.add_argument("--out", default="runs", help="parent directory of run directories (default: runs)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advcloud", description="Adversarial cloud attack and defense experiments.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth-data", help="write the synthetic dataset (or import one with --from)")
    p.add_argument("--from", dest="source", help="import an images/+gt/ or train/+test/ directory instead")
    _common(p)
    _common(sub.add_parser("train-sod", help="train the saliency detector"))
    _common(sub.add_parser("pretrain-disc", help="alternating discriminator pre-training"))
    p = sub.add_parser("attack", help="attack the test split")
    p.add_argument("--attack", nargs="+", default=["all"], metavar="KIND",
                   help=f"one or more of {', '.join(pipeline.ATTACKS)}, or all")
    _common(p)
    p = sub.add_parser("train-defense", help="train DefenseNet")
    p.add_argument("--defense-variant", nargs="+", default=["full"], metavar="VARIANT",
                   help=f"one or more of {', '.join(pipeline.VARIANT_SLUGS)}, or all")
    _common(p)
    p = sub.add_parser("defend", help="apply defenses to the clean, cloudy and attacked test images")
    p.add_argument("--defense-variant", nargs="+", default=["all"], metavar="DEFENSE",
                   help=f"one or more of {', '.join(pipeline.DEFENSES)}, or all")
    _common(p)
    _common(sub.add_parser("eval", help="score every attacked and defended set into results/*.csv"))
    _common(sub.add_parser("report", help="build report.md from results/*.csv"))
    p = sub.add_parser("pipeline", help="run every stage in order")
    p.add_argument("--from", dest="source", help="use an existing dataset directory")
    _common(p)
    return parser


def resolve_config(args):
    config = load_config(args.config) if args.config else PRESETS[args.preset]
    changes = {k: v for k, v in (("seed", args.seed), ("size", args.size)) if v is not None}
    return config.replace(**changes) if changes else config


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        limiter = apply_thread_limit()  # noqa: F841  (held for the duration of the command)
        run = pipeline.Run.create(args.out, resolve_config(args))
        cmd = args.command
        if cmd == "synth-data":
            pipeline.stage_synth_data(run, args.source)
        elif cmd == "train-sod":
            pipeline.stage_train_sod(run)
        elif cmd == "pretrain-disc":
            pipeline.stage_pretrain_disc(run)
        elif cmd == "attack":
            pipeline.stage_attack(run, args.attack)
        elif cmd == "train-defense":
            pipeline.stage_train_defense(run, args.defense_variant)
        elif cmd == "defend":
            pipeline.stage_defend(run, args.defense_variant)
        elif cmd == "eval":
            pipeline.stage_eval(run)
        elif cmd == "report":
            run.require("results/sod_scores.csv", "eval")
            write_report(run.root)
        elif cmd == "pipeline":
            pipeline.run_all(run, args.source)
    except pipeline.MissingArtifact as exc:
        print(f"advcloud: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, ValueError) as exc:
        print(f"advcloud: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(run.root)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
