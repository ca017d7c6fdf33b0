"""``rpattn <phase> --config <path> [--seed N] [--variants all|basic|full|phrase] [--out dir]``"""
import argparse
import logging
import sys
from pathlib import Path

from .config import PHASES, VARIANTS, load_config
from .errors import RpattnError


def build_parser():
    p = argparse.ArgumentParser(prog="rpattn", description="Train and evaluate the region-phrase attention GAN.")
    p.add_argument("phase", choices=PHASES)
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--variants", choices=("all",) + VARIANTS,
                   help="matching-loss variant(s) for the textenc phase; 'all' runs the three-way comparison")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("-q", "--quiet", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    # deferred so `--help` stays fast
    from . import trainer
    try:
        cfg = load_config(args.config)
        cfg.phase = args.phase
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.paths.out = str(Path(args.out).resolve())
        variants = None
        if args.variants == "all":
            variants = list(VARIANTS)
        elif args.variants:
            cfg.variant = args.variants
        result = trainer.run_phase(cfg, variants)
    except RpattnError as exc:
        print(f"rpattn: error: {exc}", file=sys.stderr)
        return 2
    if args.phase == "eval":
        print(result.to_table(), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
