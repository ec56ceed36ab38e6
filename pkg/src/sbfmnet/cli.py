"""``sbfm`` command line entry point."""
from __future__ import annotations

import argparse
import logging
import sys

from . import harness
from .exceptions import CheckpointError, ConfigError, IngestError


def _seeds(text: str):
    return tuple(harness.parse_list(text, int))


def _epsilons(text: str):
    return tuple(harness.parse_list(text))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sbfm", description="Train, attack and sweep SBFM models.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI run config with a [run] section")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=_seeds, dest="seeds", metavar="N[,N...]")
        sp.add_argument("--epsilons", type=_epsilons, metavar="LIST",
                        help="comma list, fractions allowed (e.g. 1/255,8/255)")
        sp.add_argument("--subset-per-class", type=int, metavar="N")
        sp.add_argument("--freeze-sbfm", action="store_true", default=None,
                        help="keep Sobel kernels at their initial values")

    common(sub.add_parser("train", help="train baseline and/or fused models"))
    attack = sub.add_parser("attack", help="FGSM epsilon sweep over saved checkpoints")
    common(attack)
    attack.add_argument("--checkpoint", action="append", default=[], metavar="PATH",
                        help="checkpoint to attack (repeatable; default: all under OUT/checkpoints)")
    common(sub.add_parser("sweep", help="grid over Sobel layer count l and threshold t"))
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = harness.load_run_config(
            args.config, out=args.out, seeds=args.seeds, epsilons=args.epsilons,
            subset_per_class=args.subset_per_class, freeze_sbfm=args.freeze_sbfm)
    except ConfigError as exc:
        print(f"sbfm: {exc}", file=sys.stderr)
        return harness.EXIT_INPUT
    try:
        if args.command == "train":
            harness.cmd_train(cfg)
        elif args.command == "attack":
            harness.cmd_attack(cfg, args.checkpoint)
        else:
            cells, code = harness.cmd_sweep(cfg)
            for c in cells:
                if c["status"] != "OK":
                    print(f"sbfm: cell l={c['l']} t={c['t']} FAILED: {c['error']}", file=sys.stderr)
            return code
    except CheckpointError as exc:
        print(f"sbfm: {exc}", file=sys.stderr)
        return harness.EXIT_CHECKPOINT
    except (IngestError, ConfigError) as exc:
        print(f"sbfm: {exc}", file=sys.stderr)
        return harness.EXIT_INPUT
    return harness.EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
