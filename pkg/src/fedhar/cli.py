"""Command-line entry point: ``fedhar run|stats|generate|version``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import __version__
from .data import LEVELS, FUSIONS, PartitionSpec, generate, partition, partition_stats, read_manifest, write_manifest
from .experiment import ExperimentConfig, generator_config, load_config, run_grid
from .federation import clients_per_round

LOG_ENV = "FEDHAR_LOG_LEVEL"


def _cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    result = run_grid(cfg, jobs=args.jobs, out_dir=args.out)
    out = args.out or cfg.output_dir
    with open(os.path.join(out, "summary.txt")) as fh:
        print(fh.read(), end="")
    return 1 if result["failed"] else 0


def _cmd_stats(args) -> int:
    try:
        samples = read_manifest(args.manifest)
        spec = PartitionSpec(args.level, args.fusion, args.holdout)
        clients, test = partition(samples, spec)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    st = partition_stats(clients)
    print(f"partition:          {spec.label}")
    print(f"train clients:      {st['count']}")
    print(f"clients per round:  {clients_per_round(st['count'], args.fraction)}")
    print(f"samples per client: {st['mean']:.1f} ± {st['std']:.1f}")
    print(f"train samples:      {st['total']}")
    print(f"holdout samples:    {len(test)} (subject {spec.holdout_subject})")
    return 0


def _cmd_generate(args) -> int:
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    seed = args.seed if args.seed is not None else (cfg.data_seed or 0)
    samples = generate(generator_config(cfg), seed)
    write_manifest(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedhar", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a partition x model x seed grid from a JSON config")
    p.add_argument("config")
    p.add_argument("--out", default=None, help="output directory (overrides output_dir)")
    p.add_argument("--jobs", type=int, default=1, help="grid cells to run in parallel")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("stats", help="client statistics of a sample manifest under a partition")
    p.add_argument("manifest")
    p.add_argument("--level", choices=LEVELS, required=True)
    p.add_argument("--fusion", choices=FUSIONS, required=True)
    p.add_argument("--fraction", type=float, default=0.30)
    p.add_argument("--holdout", type=int, default=6)
    p.set_defaults(func=_cmd_stats)

    p = sub.add_parser("generate", help="write a synthetic sample manifest (JSON lines)")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("version", help="print the package version")
    p.set_defaults(func=lambda args: print(__version__) or 0)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get(LOG_ENV, "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
