"""Figure construction from run directories.

A "run" is a directory holding a metrics.csv with the documented header.
Each figure draws one curve per run against the iteration column; the
quantity on the y axis is one of Y_CHOICES. Error-like quantities default
to a log y scale; the objective draws a +-1 standard deviation band around
the mean using its paired std column.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

__all__ = ["FigureSpec", "PlotError", "MissingColumnError", "Y_CHOICES",
           "load_run", "render", "build_figure"]

Y_CHOICES = ("l2_error_ema", "grad_norm_sq", "control_objective")

# quantities plotted on a log scale unless the spec overrides it
_LOG_DEFAULT = {"l2_error_ema": True, "grad_norm_sq": True,
                "control_objective": False}

# columns each quantity needs beyond "iteration": (line column, band column)
_COLUMNS = {
    "l2_error_ema": ("l2_error_ema", None),
    "grad_norm_sq": ("grad_norm_sq", None),
    "control_objective": ("control_objective_mean", "control_objective_std"),
}

_AXIS_LABEL = {
    "l2_error_ema": "L2 error (EMA)",
    "grad_norm_sq": "squared gradient norm",
    "control_objective": "control objective",
}

# fixed style so identical inputs give identical images
_STYLE = {
    "figure.figsize": (6.4, 4.2),
    "figure.dpi": 120,
    "savefig.dpi": 120,
    "font.size": 10,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.6,
    "svg.hashsalt": "socplot",
}


class PlotError(Exception):
    """Anything that prevents building the requested figure."""


class MissingColumnError(PlotError):
    """A run's metrics.csv lacks a column the figure needs."""


@dataclass
class FigureSpec:
    """What to draw: runs to compare, the y quantity, axes, output path."""

    runs: list[tuple[str, str]]       # (directory, legend label)
    y: str = "l2_error_ema"
    out: str = "figure.png"
    log_y: bool | None = None         # None: quantity default
    title: str = ""

    def __post_init__(self):
        if self.y not in Y_CHOICES:
            raise PlotError(
                f"unknown y quantity {self.y!r}; choose from "
                f"{', '.join(Y_CHOICES)}")
        if not self.runs:
            raise PlotError("no runs given; nothing to plot")


def load_run(directory, columns: list[str]) -> dict[str, np.ndarray]:
    """Read the named columns (plus iteration) from a run's metrics.csv."""
    path = os.path.join(directory, "metrics.csv")
    if not os.path.isfile(path):
        raise PlotError(f"no metrics.csv in run directory {directory}")
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for name in ["iteration", *columns]:
            if name not in header:
                raise MissingColumnError(
                    f"column {name!r} missing from {path} "
                    f"(found: {', '.join(header)})")
        rows = list(reader)
    out: dict[str, np.ndarray] = {}
    out["iteration"] = np.array([int(r["iteration"]) for r in rows])
    for name in columns:
        out[name] = np.array([float(r[name]) for r in rows])
    return out


def build_figure(spec: FigureSpec):
    """The matplotlib Figure for a FigureSpec (render() writes it out)."""
    line_col, band_col = _COLUMNS[spec.y]
    needed = [line_col] + ([band_col] if band_col else [])
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        for directory, label in spec.runs:
            data = load_run(directory, needed)
            x = data["iteration"]
            y = data[line_col]
            (line,) = ax.plot(x, y, label=label)
            if band_col is not None:
                std = data[band_col]
                ax.fill_between(x, y - std, y + std, alpha=0.25,
                                color=line.get_color(), linewidth=0)
        log_y = _LOG_DEFAULT[spec.y] if spec.log_y is None else spec.log_y
        if log_y:
            ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel(_AXIS_LABEL[spec.y])
        if spec.title:
            ax.set_title(spec.title)
        ax.legend()
        fig.tight_layout()
    return fig


def render(spec: FigureSpec) -> str:
    """Write the figure to spec.out and return the path."""
    fig = build_figure(spec)
    try:
        # strip the library-version comment so identical inputs give
        # byte-identical files
        fig.savefig(spec.out, metadata={"Software": None})
    finally:
        plt.close(fig)
    return spec.out
