"""Plotting tool for training-run metrics CSVs.

Reads the `metrics.csv` files that training runs write and renders comparison
figures: error curves, gradient-norm curves, and objective curves with
+-1 standard deviation bands. This package talks to the runs only through
their CSV files; it never imports the training code.
"""

from .figures import (
    FigureSpec,
    MissingColumnError,
    PlotError,
    Y_CHOICES,
    load_run,
    render,
)

__all__ = ["FigureSpec", "MissingColumnError", "PlotError", "Y_CHOICES",
           "load_run", "render"]
