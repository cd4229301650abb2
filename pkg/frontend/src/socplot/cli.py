"""Command-line entry point.

    socplot --runs out/socm:SOCM out/adjoint:adjoint --y l2_error_ema --out fig.png

Each --runs item is `directory[:label]`; the label defaults to the directory
basename. Exit codes: 0 success, 2 on any input or rendering problem.
"""

from __future__ import annotations

import argparse
import sys

from .figures import FigureSpec, PlotError, Y_CHOICES, render

__all__ = ["main"]


def _parse_run(item: str) -> tuple[str, str]:
    directory, sep, label = item.rpartition(":")
    if not sep:
        directory, label = item, ""
    if not label:
        label = directory.rstrip("/").rsplit("/", 1)[-1] or directory
    return directory, label


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="socplot",
        description="Plot metrics.csv quantities from training run directories.")
    parser.add_argument("--runs", required=True, nargs="+",
                        metavar="DIR[:LABEL]",
                        help="run directories to compare, with legend labels")
    parser.add_argument("--y", default="l2_error_ema", choices=Y_CHOICES,
                        help="quantity to plot (default: l2_error_ema)")
    parser.add_argument("--out", required=True, help="output image path")
    scale = parser.add_mutually_exclusive_group()
    scale.add_argument("--log", dest="log_y", action="store_true",
                       default=None, help="force a log y axis")
    scale.add_argument("--linear", dest="log_y", action="store_false",
                       help="force a linear y axis")
    parser.add_argument("--title", default="", help="figure title")
    args = parser.parse_args(argv)

    try:
        spec = FigureSpec(runs=[_parse_run(item) for item in args.runs],
                          y=args.y, out=args.out, log_y=args.log_y,
                          title=args.title)
        path = render(spec)
    except (PlotError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
