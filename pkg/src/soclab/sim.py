"""Euler-Maruyama simulation of controlled SDEs and path functionals.

dX_t = (b(X_t, t) + sigma(t) v(X_t, t)) dt + sqrt(lambda) sigma(t) dB_t

Time integrals use left-endpoint Riemann sums on the uniform grid t_k = k*T/K,
consistent with the Ito convention of the stochastic integrals. Importance
weights are accumulated in log space; overflow saturates to +inf and is
counted, never raised.

Rollouts come in two flavors selected by `detach`: plain numpy (states are
constants for gradient purposes) and tape-recorded (gradients flow through
states into the control parameters, used by the adjoint loss). Both flavors
produce bitwise-identical state arrays for the same increments; `euler_step`
is the shared single-step recurrence and doubles as the reproducibility
oracle for stored trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var, tiled_matmul_values
from .errors import ContractError, ResourceError, SimulationDivergedError

__all__ = [
    "TrajectoryBatch", "ImportanceWeights", "sample_increments", "euler_step",
    "rollout", "work_functional", "stochastic_integral", "importance_weight",
    "dump_states",
]

# exp() overflows float64 just above this
_LOG_MAX = float(np.log(np.finfo(np.float64).max))

# refuse traced rollouts whose tape would exceed roughly this many bytes
_TRACE_BYTE_BUDGET = 4e9


@dataclass
class TrajectoryBatch:
    times: np.ndarray            # (K+1,)
    states: np.ndarray           # (m, K+1, d)
    increments: np.ndarray       # (m, K, d)
    control_values: np.ndarray   # (m, K, d), v(X_k, t_k) at left endpoints
    detached: bool
    # populated only for traced rollouts (detach=False)
    tape: Tape | None = field(default=None, repr=False)
    state_nodes: list | None = field(default=None, repr=False)
    control_nodes: list | None = field(default=None, repr=False)

    @property
    def num_steps(self) -> int:
        return self.increments.shape[1]

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])


@dataclass
class ImportanceWeights:
    values: np.ndarray      # (m,), +inf where saturated
    log_values: np.ndarray  # (m,)
    n_saturated: int


def sample_increments(m: int, steps: int, dim: int, horizon: float,
                      rng: np.random.Generator) -> np.ndarray:
    """Brownian increments, shape (m, steps, dim), each entry N(0, T/steps).

    Filled in C order, so trajectory i consumes the same slice of the raw
    stream regardless of the batch size.
    """
    if m < 1 or dim < 1 or steps < 0:
        raise ContractError("sample_increments requires m, d >= 1 and steps >= 0")
    if steps == 0:
        return np.zeros((m, 0, dim))
    dt = horizon / steps
    return rng.standard_normal((m, steps, dim)) * np.sqrt(dt)


def euler_step(x: np.ndarray, drift: np.ndarray, control: np.ndarray,
               sigma: np.ndarray, db: np.ndarray, dt: float,
               noise_level: float) -> np.ndarray:
    """One Euler-Maruyama step; the exact recurrence stored trajectories obey."""
    sigma_t = sigma.T
    return (x + dt * (drift + tiled_matmul_values(control, sigma_t))
            + np.sqrt(noise_level) * tiled_matmul_values(db, sigma_t))


def _check_finite(x: np.ndarray, step: int):
    if np.all(np.isfinite(x)):
        return
    bad = np.argwhere(~np.isfinite(x))
    i = int(bad[0, 0])
    raise SimulationDivergedError(trajectory=i, step=step)


def rollout(spec, policy, increments: np.ndarray, *, detach: bool = True,
            x0: np.ndarray | None = None, rng: np.random.Generator | None = None,
            tape: Tape | None = None, pvars: dict | None = None,
            t0: float = 0.0) -> TrajectoryBatch:
    """Simulate the controlled SDE under `policy` along the given increments.

    With detach=True the batch holds plain arrays. With detach=False every
    state and control evaluation is recorded on `tape` (which must be supplied
    together with `pvars`) so losses can differentiate through the dynamics.
    """
    increments = np.asarray(increments, dtype=float)
    if increments.ndim != 3 or increments.shape[2] != spec.dim:
        raise ContractError(
            f"increments must have shape (m, steps, {spec.dim}), got {increments.shape}")
    m, steps, d = increments.shape
    if steps < 1:
        raise ContractError("rollout requires at least one step")
    if not 0.0 <= t0 < spec.horizon:
        raise ContractError("t0 must lie in [0, horizon)")
    dt = (spec.horizon - t0) / steps
    times = t0 + np.arange(steps + 1) * dt
    if x0 is None:
        if rng is None:
            raise ContractError("rollout needs either x0 or an rng to sample it")
        x0 = spec.initial_law.sample(m, d, rng)
    else:
        x0 = np.asarray(x0, dtype=float)
        if x0.shape != (m, d):
            raise ContractError(f"x0 must have shape ({m}, {d})")

    if not detach:
        if tape is None or pvars is None:
            raise ContractError("traced rollout requires tape and pvars")
        width = max((p.shape[-1] for p in policy.params.values()), default=d)
        est_bytes = float(m) * steps * max(width, d) * 8.0 * 10.0
        if est_bytes > _TRACE_BYTE_BUDGET:
            raise ResourceError(
                f"traced rollout would need ~{est_bytes:.2e} bytes of tape")

    states = np.empty((m, steps + 1, d))
    control_values = np.empty((m, steps, d))
    states[:, 0] = x0
    sqrt_lam = np.sqrt(spec.noise_level)

    state_nodes: list | None = None
    control_nodes: list | None = None
    if detach:
        x = x0
        for k in range(steps):
            t_k = times[k]
            u = policy.eval_batch(x, t_k)
            control_values[:, k] = u
            x = euler_step(x, spec.drift(x, t_k), u, spec.diffusion(t_k),
                           increments[:, k], dt, spec.noise_level)
            _check_finite(x, k + 1)
            states[:, k + 1] = x
    else:
        state_nodes = []
        control_nodes = []
        x_var = tape.leaf(x0)
        state_nodes.append(x_var)
        for k in range(steps):
            t_k = times[k]
            u_var = policy.forward(tape, pvars, x_var, t_k)
            control_nodes.append(u_var)
            control_values[:, k] = u_var.value
            xv = x_var.value
            bv = spec.drift(xv, t_k)
            jac = spec.drift_jacobian(xv, t_k)
            # VJP of the drift rows under the convention jac[i,j] = d b_j / d x_i
            b_var = ad.lift(x_var, bv,
                            lambda g, jac=jac: np.einsum("mij,mj->mi", jac, g))
            sigma = spec.diffusion(t_k)
            noise = sqrt_lam * tiled_matmul_values(increments[:, k], sigma.T)
            drift_term = ad.mul(ad.add(b_var, ad.matmul(u_var, sigma.T)), dt)
            x_var = ad.add(ad.add(x_var, drift_term), noise)
            _check_finite(x_var.value, k + 1)
            state_nodes.append(x_var)
            states[:, k + 1] = x_var.value

    return TrajectoryBatch(times=times, states=states, increments=increments,
                           control_values=control_values, detached=detach,
                           tape=None if detach else tape,
                           state_nodes=state_nodes, control_nodes=control_nodes)


def work_functional(spec, traj: TrajectoryBatch, start_index: int = 0) -> np.ndarray:
    """W(X, t_{k0}) = dt * sum_{k>=k0} f(X_k, t_k) + g(X_K), per trajectory."""
    steps = traj.num_steps
    if not 0 <= start_index <= steps:
        raise ContractError(f"start_index must lie in [0, {steps}]")
    m = traj.states.shape[0]
    total = np.zeros(m)
    for k in range(start_index, steps):
        total += spec.state_cost(traj.states[:, k], traj.times[k])
    return traj.dt * total + spec.terminal_cost(traj.states[:, steps])


def stochastic_integral(integrand: np.ndarray, increments: np.ndarray) -> np.ndarray:
    """Ito sum sum_k <integrand_k, dB_k> per trajectory (left endpoints)."""
    integrand = np.asarray(integrand, dtype=float)
    increments = np.asarray(increments, dtype=float)
    if integrand.shape != increments.shape:
        raise ContractError(
            f"integrand shape {integrand.shape} != increments shape {increments.shape}")
    return np.einsum("mkd,mkd->m", integrand, increments)


def importance_weight(spec, traj: TrajectoryBatch) -> ImportanceWeights:
    """alpha = exp(-W/lam - int<v,dB>/sqrt(lam) - int ||v||^2 dt / (2 lam)).

    Uses the control evaluations recorded during rollout, so the weight
    matches the sampling control exactly. Overflow saturates to +inf and is
    counted in n_saturated.
    """
    lam = spec.noise_level
    w = work_functional(spec, traj, 0)
    girsanov = stochastic_integral(traj.control_values, traj.increments)
    v_sq = traj.dt * np.einsum("mkd,mkd->m", traj.control_values, traj.control_values)
    log_alpha = -w / lam - girsanov / np.sqrt(lam) - 0.5 * v_sq / lam
    with np.errstate(over="ignore"):
        values = np.exp(log_alpha)
    n_saturated = int(np.count_nonzero(log_alpha > _LOG_MAX))
    return ImportanceWeights(values=values, log_values=log_alpha,
                             n_saturated=n_saturated)


def dump_states(traj: TrajectoryBatch, path):
    """Debug CSV: one row per (trajectory, grid point)."""
    m, n_nodes, d = traj.states.shape
    with open(path, "w") as fh:
        cols = ",".join(f"x{j}" for j in range(d))
        fh.write(f"trajectory,step,t,{cols}\n")
        for i in range(m):
            for k in range(n_nodes):
                row = ",".join(repr(float(v)) for v in traj.states[i, k])
                fh.write(f"{i},{k},{traj.times[k]!r},{row}\n")
