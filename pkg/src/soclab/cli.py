"""Command-line entry point.

    soclab train --config run.ini [--setting S --loss L --seed N --iters N
                                   --output-dir D --warm-start M]
    soclab eval --checkpoint C [--setting S --seed N]
    soclab ground-truth --setting S --cache DIR

Exit codes: 0 success, 2 configuration error, 3 aborted run.
"""

from __future__ import annotations

import argparse
import json
import sys

from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    RunAbortedError,
    SoclabError,
)
from .runner import (
    LOSS_NAMES,
    build_ground_truth_cache,
    eval_checkpoint,
    load_config,
    train,
)

__all__ = ["main"]


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="soclab",
        description="Train and evaluate stochastic optimal controls.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a training loop from a config file")
    p_train.add_argument("--config", required=True, help="INI run configuration")
    p_train.add_argument("--setting", help="override the problem setting")
    p_train.add_argument("--loss", choices=LOSS_NAMES, help="override the loss")
    p_train.add_argument("--seed", type=int, help="override the run seed")
    p_train.add_argument("--iters", type=int, dest="iterations",
                         help="override the iteration count")
    p_train.add_argument("--output-dir", dest="output_dir",
                         help="override the output directory")
    p_train.add_argument("--warm-start", dest="warm_start",
                         help="none, gaussian, or a spline checkpoint path")

    p_eval = sub.add_parser("eval", help="recompute metrics for a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--setting", help="evaluate on this setting instead of "
                                          "the one stored in the checkpoint")
    p_eval.add_argument("--seed", type=int, default=0,
                        help="seed of the evaluation batches")

    p_gt = sub.add_parser("ground-truth",
                          help="precompute ground-truth tables for a setting")
    p_gt.add_argument("--setting", required=True)
    p_gt.add_argument("--cache", required=True, help="cache directory")
    p_gt.add_argument("--dim", type=int, help="dimension override")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            overrides = {
                "setting": args.setting,
                "loss": args.loss,
                "seed": args.seed,
                "iterations": args.iterations,
                "output_dir": args.output_dir,
                "warm_start": args.warm_start,
            }
            config = load_config(args.config, overrides)
            summary = train(config)
            print(f"run complete: {summary['iterations_run']} iterations, "
                  f"outputs in {config.output_dir}")
            return 0
        if args.command == "eval":
            result = eval_checkpoint(args.checkpoint, setting=args.setting,
                                     seed=args.seed)
            print(json.dumps(result, indent=2, sort_keys=True))
            return 0
        if args.command == "ground-truth":
            path = build_ground_truth_cache(args.setting, args.cache,
                                            dim=args.dim)
            print(f"ground truth cached at {path}")
            return 0
        parser.error(f"unknown command {args.command!r}")
        return 2
    except RunAbortedError as err:
        print(f"aborted: {err}", file=sys.stderr)
        return 3
    except (ConfigError, CheckpointError, ContractError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except SoclabError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
