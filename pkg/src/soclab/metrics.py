"""Evaluation quantities recorded during training.

Covers the weighted control L2 error with its EMA protocol, the control
objective and its zero-variance-at-the-optimum variant with the extra Ito
term, the normalized dispersion of the importance weights, and the squared
gradient norm of the control parameters.

CSV layout: `CSV_COLUMNS` fixes the column order of metrics.csv; the header
row written by `format_header` documents it in the output itself. Wall-clock
time is kept on the record for summary reporting but deliberately excluded
from the CSV so that repeated runs with the same seed produce bitwise
identical files.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegenerateWeightsError
from .nets import ClosedFormPolicy, eval_time_grouped
from .sim import (
    TrajectoryBatch,
    rollout,
    sample_increments,
    stochastic_integral,
    work_functional,
)

__all__ = [
    "MetricsRecord",
    "CSV_COLUMNS",
    "format_header",
    "format_row",
    "control_l2_error",
    "ema_update",
    "control_objective",
    "stl_objective",
    "alpha_normalized_std",
    "grad_norm_sq",
]


@dataclass
class MetricsRecord:
    """One evaluation-cadence snapshot; mirrors one metrics.csv row."""

    iteration: int
    loss_value: float
    grad_norm_sq: float
    l2_error: float
    l2_error_ema: float
    control_objective_mean: float
    control_objective_std: float
    stl_objective_mean: float
    stl_objective_std: float
    alpha_normalized_std: float
    n_saturated: int
    wall_clock: float = 0.0  # informational; not written to the CSV


CSV_COLUMNS = (
    "iteration",
    "loss_value",
    "grad_norm_sq",
    "l2_error",
    "l2_error_ema",
    "control_objective_mean",
    "control_objective_std",
    "stl_objective_mean",
    "stl_objective_std",
    "alpha_normalized_std",
    "n_saturated",
)

_INT_COLUMNS = {"iteration", "n_saturated"}


def format_header() -> str:
    return ",".join(CSV_COLUMNS)


def format_row(record: MetricsRecord) -> str:
    """Serialize a record deterministically: ints verbatim, floats via repr
    (shortest round-trip form), so identical runs give identical bytes."""
    parts = []
    for name in CSV_COLUMNS:
        value = getattr(record, name)
        if name in _INT_COLUMNS:
            parts.append(str(int(value)))
        else:
            parts.append(repr(float(value)))
    return ",".join(parts)


def _control_values_on_grid(policy, states: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Evaluate a control on every (state, time) node of a full rollout grid."""
    m, n_times, d = states.shape
    x_flat = states.reshape(m * n_times, d)
    t_flat = np.tile(times, m)
    if hasattr(policy, "eval_batch"):
        u_flat = policy.eval_batch(x_flat, t_flat)
    else:
        u_flat = eval_time_grouped(policy, x_flat, t_flat)
    return np.asarray(u_flat, dtype=float).reshape(m, n_times, d)


def control_l2_error(spec, u, u_star, m: int, steps: int,
                     rng: np.random.Generator) -> float:
    """Weighted L2 distance between a control and the optimal one.

    Rolls out m trajectories under u_star and returns

        E[ mean_t ||u* - u||^2 (X_t, t) * exp(-lambda^-1 V(X_0, 0)) ]
        -------------------------------------------------------------
                    E[ exp(-lambda^-1 V(X_0, 0)) ]

    with t averaged over the full uniform grid (K+1 nodes including T). For
    point initial laws the weight is constant and cancels, so V is never
    evaluated; otherwise u_star must expose a `value(x, t)` method.

    `u` and `u_star` may be policy objects (with eval_batch) or plain
    callables (x, t) -> u; ground-truth wrappers expose both `control` and
    `value`.
    """
    star_fn = getattr(u_star, "control", u_star)
    x0 = spec.initial_law.sample(m, spec.dim, rng)
    increments = sample_increments(m, steps, spec.dim, spec.horizon, rng)
    traj = rollout(spec, ClosedFormPolicy(star_fn), increments, x0=x0)

    diff = (_control_values_on_grid(star_fn, traj.states, traj.times)
            - _control_values_on_grid(u, traj.states, traj.times))
    per_traj = np.mean(np.sum(diff * diff, axis=2), axis=1)

    if spec.initial_law.is_point:
        weights = np.ones(m)
    else:
        value_fn = getattr(u_star, "value", None)
        if value_fn is None:
            raise ContractError(
                "control_l2_error with a non-point initial law needs a ground "
                "truth exposing value(x, t)")
        v0 = np.asarray(value_fn(x0, 0.0), dtype=float).reshape(m)
        weights = np.exp(-v0 / spec.noise_level)
    denom = float(weights.sum())
    if denom <= 0.0 or not np.isfinite(denom):
        raise DegenerateWeightsError("L2-error weights sum to zero or overflow")
    return float(np.dot(weights, per_traj) / denom)


def ema_update(current: float | None, new: float, beta: float = 0.02) -> float:
    """Exponential moving average; the first update returns `new` unchanged."""
    if current is None:
        return float(new)
    return float((1.0 - beta) * current + beta * new)


def _objective_per_trajectory(spec, traj: TrajectoryBatch) -> np.ndarray:
    u = traj.control_values
    m = u.shape[0]
    quad = 0.5 * traj.dt * np.sum(u * u, axis=(1, 2))
    return quad + work_functional(spec, traj, 0)


def control_objective(spec, traj: TrajectoryBatch) -> tuple[float, float]:
    """Discretized objective int (1/2 ||u||^2 + f) dt + g(X_T) under the
    trajectory's own control; batch mean and (unbiased) standard deviation."""
    values = _objective_per_trajectory(spec, traj)
    return float(values.mean()), float(values.std(ddof=1))


def stl_objective(spec, traj: TrajectoryBatch) -> tuple[float, float]:
    """Control objective plus the zero-mean Ito term sqrt(lam) int <u, dB>;
    same mean in expectation, zero variance when u is optimal (the scaling
    matches the sqrt(lam) in front of the noise in the dynamics)."""
    values = (_objective_per_trajectory(spec, traj)
              + np.sqrt(spec.noise_level)
              * stochastic_integral(traj.control_values, traj.increments))
    return float(values.mean()), float(values.std(ddof=1))


def alpha_normalized_std(weights: np.ndarray) -> float:
    """Sample std over sample mean of the importance weights."""
    w = np.asarray(weights, dtype=float).reshape(-1)
    if w.shape[0] < 2:
        raise ContractError("alpha_normalized_std needs at least 2 weights")
    mean = float(w.mean())
    if mean == 0.0:
        raise DegenerateWeightsError("importance weights have zero mean")
    return float(w.std(ddof=1) / mean)


def grad_norm_sq(grads: dict[str, np.ndarray]) -> float:
    """Sum of squared entries over the control parameter group only."""
    total = 0.0
    for arr in grads.values():
        a = np.asarray(arr, dtype=float)
        total += float(np.dot(a.ravel(), a.ravel()))
    return total
