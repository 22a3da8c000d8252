"""Command-line front door for the experiment runner.

Subcommands map one-to-one onto the run_* functions in the experiment
module, which also documents the JSON config grammar. Flag precedence:
CLI flag > config file > preset default. Exit code 0 only if the stage
produced all requested outputs; errors name the failing stage on stderr.
"""

import argparse
import dataclasses
import sys

from .experiment import (
    load_config,
    run_evaluate,
    run_gen_corpus,
    run_sweep_iters,
    run_sweep_votes,
    run_train,
)

_STAGES = ("gen-corpus", "train", "evaluate", "sweep-votes", "sweep-iters")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config",
        default=None,
        metavar="PATH",
        help='JSON config file, or "paper-preset" for the built-in grid (the default)',
    )
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--out", default=None, metavar="DIR", help="override the output directory")
    common.add_argument("--threads", type=int, default=1, metavar="N", help="worker threads per grid cell")
    common.add_argument("--no-timing", action="store_true", help="blank wall_time cells for byte-identical reruns")

    parser = argparse.ArgumentParser(
        prog="asvrobust",
        description="speaker-verification adversarial robustness testbed",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen-corpus": "synthesize the speaker corpus, manifest, and trial lists",
        "train": "train the embedding model on the generated corpus",
        "evaluate": "score the attack x defense grid into report.csv",
        "sweep-votes": "FAR/FRR versus vote count K at fixed epsilon/sigma",
        "sweep-iters": "FAR/FRR versus attack iterations N (perfect knowledge)",
    }
    for stage in _STAGES:
        sub.add_parser(stage, parents=[common], help=helps[stage])
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    stage = args.command
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config = dataclasses.replace(config, seed=args.seed)
        if args.out is not None:
            config = dataclasses.replace(config, out_dir=args.out)
        out = config.out_dir
        timing = not args.no_timing

        if stage == "gen-corpus":
            digest = run_gen_corpus(config, out)
            print(f"corpus manifest sha256 {digest}")
        elif stage == "train":
            print(f"wrote {run_train(config, out)}")
        elif stage == "evaluate":
            print(f"wrote {run_evaluate(config, out, threads=args.threads, timing=timing)}")
        elif stage == "sweep-votes":
            print(f"wrote {run_sweep_votes(config, out, threads=args.threads, timing=timing)}")
        else:
            print(f"wrote {run_sweep_iters(config, out, threads=args.threads, timing=timing)}")
    except Exception as exc:
        print(f"error in {stage}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
