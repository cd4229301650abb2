"""Control problem definitions and the benchmark setting registry.

A ProblemSpec bundles the coefficients of the controlled SDE

    dX_t = (b(X_t, t) + sigma(t) u(X_t, t)) dt + sqrt(lambda) sigma(t) dB_t

together with the running cost f, terminal cost g, their analytic derivatives,
and the initial law. All callbacks are vectorized: they accept arrays with any
number of leading batch axes over the state dimension and broadcast the result.
No autodiff runs through these callbacks; losses consume the analytic
derivatives directly.

Jacobian convention: drift_jacobian(x, t)[i, j] = d b_j / d x_i, so for the
linear drift b(x) = A x the Jacobian is A^T. This orientation is pinned by the
finite-difference validation of the pathwise gradient estimator.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError

__all__ = [
    "InitialLaw",
    "ProblemSpec",
    "make_setting",
    "make_linear_quadratic",
    "double_well_potential_grad",
    "SETTING_NAMES",
]


@dataclass(frozen=True)
class InitialLaw:
    """Initial state distribution: a point mass or a scaled standard Gaussian."""

    kind: str  # "point" | "gaussian"
    point: np.ndarray | None = None
    scale: float = 1.0

    def sample(self, m: int, dim: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "point":
            x0 = np.asarray(self.point, dtype=float)
            return np.tile(x0, (m, 1))
        if self.kind == "gaussian":
            return self.scale * rng.standard_normal((m, dim))
        raise ConfigError(f"unknown initial law kind {self.kind!r}")

    @property
    def is_point(self) -> bool:
        return self.kind == "point"


@dataclass(frozen=True)
class ProblemSpec:
    """Immutable description of one stochastic optimal control problem."""

    name: str
    dim: int
    horizon: float
    noise_level: float
    drift: Callable
    drift_jacobian: Callable
    state_cost: Callable
    state_cost_grad: Callable
    terminal_cost: Callable
    terminal_cost_grad: Callable
    diffusion: Callable  # t -> (d, d), invertible
    diffusion_inv: Callable
    initial_law: InitialLaw
    # setting-specific coefficient arrays (A, P, Q, xi, kappa, ...) consumed by
    # the ground-truth module; never touched by the training path
    coefficients: dict = field(default_factory=dict)


def double_well_potential_grad(x: np.ndarray, kappa: np.ndarray) -> np.ndarray:
    """Gradient of the separable quartic potential sum_i kappa_i (x_i^2 - 1)^2.

    Component i is 4 kappa_i x_i (x_i^2 - 1); the double-well drift is the
    negative of this.
    """
    x = np.asarray(x, dtype=float)
    return 4.0 * kappa * x * (x * x - 1.0)


def _constant_matrix_fns(mat: np.ndarray):
    mat = np.asarray(mat, dtype=float)
    inv = np.linalg.inv(mat)

    def diffusion(t):
        return mat

    def diffusion_inv(t):
        return inv

    return diffusion, diffusion_inv


def make_linear_quadratic(
    A: np.ndarray,
    P: np.ndarray,
    Q: np.ndarray,
    sigma0: np.ndarray | None = None,
    noise_level: float = 1.0,
    horizon: float = 1.0,
    initial_law: InitialLaw | None = None,
    name: str = "linear_quadratic",
) -> ProblemSpec:
    """Generic linear-drift quadratic-cost problem: b=Ax, f=x'Px, g=x'Qx."""
    A = np.asarray(A, dtype=float)
    P = np.asarray(P, dtype=float)
    Q = np.asarray(Q, dtype=float)
    d = A.shape[0]
    if sigma0 is None:
        sigma0 = np.eye(d)
    sigma0 = np.asarray(sigma0, dtype=float)
    if initial_law is None:
        initial_law = InitialLaw("gaussian", scale=0.5)
    A_T = A.T.copy()

    def drift(x, t):
        return x @ A_T  # rows are A @ x_i

    def drift_jacobian(x, t):
        x = np.asarray(x)
        return np.broadcast_to(A_T, x.shape[:-1] + (d, d))

    def state_cost(x, t):
        return np.einsum("...i,ij,...j->...", x, P, x)

    def state_cost_grad(x, t):
        return 2.0 * (x @ P)

    def terminal_cost(x):
        return np.einsum("...i,ij,...j->...", x, Q, x)

    def terminal_cost_grad(x):
        return 2.0 * (x @ Q)

    diffusion, diffusion_inv = _constant_matrix_fns(sigma0)
    return ProblemSpec(
        name=name,
        dim=d,
        horizon=float(horizon),
        noise_level=float(noise_level),
        drift=drift,
        drift_jacobian=drift_jacobian,
        state_cost=state_cost,
        state_cost_grad=state_cost_grad,
        terminal_cost=terminal_cost,
        terminal_cost_grad=terminal_cost_grad,
        diffusion=diffusion,
        diffusion_inv=diffusion_inv,
        initial_law=initial_law,
        coefficients={"A": A, "P": P, "Q": Q, "sigma0": sigma0},
    )


def _quadratic_ou(dim: int, a: float, p: float, q: float, name: str) -> ProblemSpec:
    eye = np.eye(dim)
    return make_linear_quadratic(
        a * eye, p * eye, q * eye,
        sigma0=eye,
        noise_level=1.0,
        horizon=1.0,
        initial_law=InitialLaw("gaussian", scale=0.5),
        name=name,
    )


def _linear_ou(dim: int, seed: int) -> ProblemSpec:
    # xi sampled once per construction; N(0, 1/d) keeps I + xi well-conditioned
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(11,))))
    xi = rng.standard_normal((dim, dim)) / np.sqrt(dim)
    A = -np.eye(dim) + xi
    sigma0 = np.eye(dim) + xi
    gamma = np.ones(dim)
    A_T = A.T.copy()

    def drift(x, t):
        return x @ A_T

    def drift_jacobian(x, t):
        x = np.asarray(x)
        return np.broadcast_to(A_T, x.shape[:-1] + (dim, dim))

    def state_cost(x, t):
        x = np.asarray(x)
        return np.zeros(x.shape[:-1])

    def state_cost_grad(x, t):
        return np.zeros_like(np.asarray(x, dtype=float))

    def terminal_cost(x):
        return np.asarray(x) @ gamma

    def terminal_cost_grad(x):
        x = np.asarray(x)
        return np.broadcast_to(gamma, x.shape)

    diffusion, diffusion_inv = _constant_matrix_fns(sigma0)
    return ProblemSpec(
        name="linear_ou",
        dim=dim,
        horizon=1.0,
        noise_level=1.0,
        drift=drift,
        drift_jacobian=drift_jacobian,
        state_cost=state_cost,
        state_cost_grad=state_cost_grad,
        terminal_cost=terminal_cost,
        terminal_cost_grad=terminal_cost_grad,
        diffusion=diffusion,
        diffusion_inv=diffusion_inv,
        initial_law=InitialLaw("gaussian", scale=0.5),
        coefficients={"A": A, "sigma0": sigma0, "gamma": gamma, "xi": xi},
    )


def _double_well(dim: int) -> ProblemSpec:
    kappa = np.ones(dim)
    nu = np.ones(dim)
    kappa[: min(3, dim)] = 5.0
    nu[: min(3, dim)] = 3.0
    eye = np.eye(dim)

    def drift(x, t):
        return -double_well_potential_grad(x, kappa)

    def drift_jacobian(x, t):
        x = np.asarray(x, dtype=float)
        diag = -4.0 * kappa * (3.0 * x * x - 1.0)
        out = np.zeros(x.shape[:-1] + (dim, dim))
        idx = np.arange(dim)
        out[..., idx, idx] = diag
        return out

    def state_cost(x, t):
        x = np.asarray(x)
        return np.zeros(x.shape[:-1])

    def state_cost_grad(x, t):
        return np.zeros_like(np.asarray(x, dtype=float))

    def terminal_cost(x):
        x = np.asarray(x, dtype=float)
        return np.sum(nu * (x * x - 1.0) ** 2, axis=-1)

    def terminal_cost_grad(x):
        return double_well_potential_grad(x, nu)

    diffusion, diffusion_inv = _constant_matrix_fns(eye)
    return ProblemSpec(
        name="double_well",
        dim=dim,
        horizon=1.0,
        noise_level=1.0,
        drift=drift,
        drift_jacobian=drift_jacobian,
        state_cost=state_cost,
        state_cost_grad=state_cost_grad,
        terminal_cost=terminal_cost,
        terminal_cost_grad=terminal_cost_grad,
        diffusion=diffusion,
        diffusion_inv=diffusion_inv,
        initial_law=InitialLaw("point", point=np.zeros(dim)),
        coefficients={"kappa": kappa, "nu": nu},
    )


def _pis_mixture(dim: int) -> ProblemSpec:
    """Sampler problem: reach the two-Gaussian mixture from a point at the origin."""
    means = np.zeros((2, dim))
    means[0, 0] = 1.0
    means[1, 0] = -1.0
    log_half = np.log(0.5)
    const = 0.5 * dim * np.log(2.0 * np.pi)
    eye = np.eye(dim)

    def _component_logs(x):
        # (..., 2): log of each mixture component density plus the 1/2 weight
        diffs = x[..., None, :] - means  # (..., 2, d)
        return log_half - 0.5 * np.sum(diffs * diffs, axis=-1) - const

    def log_mixture(x):
        logs = _component_logs(np.asarray(x, dtype=float))
        mx = np.max(logs, axis=-1)
        return mx + np.log(np.sum(np.exp(logs - mx[..., None]), axis=-1))

    def drift(x, t):
        return np.zeros_like(np.asarray(x, dtype=float))

    def drift_jacobian(x, t):
        x = np.asarray(x)
        return np.zeros(x.shape[:-1] + (dim, dim))

    def state_cost(x, t):
        x = np.asarray(x)
        return np.zeros(x.shape[:-1])

    def state_cost_grad(x, t):
        return np.zeros_like(np.asarray(x, dtype=float))

    def terminal_cost(x):
        x = np.asarray(x, dtype=float)
        return -0.5 * np.sum(x * x, axis=-1) - const - log_mixture(x)

    def terminal_cost_grad(x):
        x = np.asarray(x, dtype=float)
        logs = _component_logs(x)
        mx = np.max(logs, axis=-1, keepdims=True)
        wts = np.exp(logs - mx)
        wts = wts / np.sum(wts, axis=-1, keepdims=True)  # responsibilities
        grad_logmu = np.sum(wts[..., None] * (means - x[..., None, :]), axis=-2)
        return -x - grad_logmu

    diffusion, diffusion_inv = _constant_matrix_fns(eye)
    return ProblemSpec(
        name=f"pis_mixture_d{dim}",
        dim=dim,
        horizon=1.0,
        noise_level=1.0,
        drift=drift,
        drift_jacobian=drift_jacobian,
        state_cost=state_cost,
        state_cost_grad=state_cost_grad,
        terminal_cost=terminal_cost,
        terminal_cost_grad=terminal_cost_grad,
        diffusion=diffusion,
        diffusion_inv=diffusion_inv,
        initial_law=InitialLaw("point", point=np.zeros(dim)),
        coefficients={"mixture_means": means},
    )


# canonical setting names; each maps to (builder taking (seed, dim), default dim,
# default hyperparameters)
_REGISTRY = {
    "quadratic_ou_easy": (
        lambda seed, dim: _quadratic_ou(dim, 0.2, 0.2, 0.1, "quadratic_ou_easy"),
        20,
        {"steps": 50, "batch": 128},
    ),
    "quadratic_ou_hard": (
        lambda seed, dim: _quadratic_ou(dim, 1.0, 1.0, 0.5, "quadratic_ou_hard"),
        20,
        {"steps": 150, "batch": 64},
    ),
    "linear_ou": (
        lambda seed, dim: _linear_ou(dim, seed),
        10,
        {"steps": 100, "batch": 128},
    ),
    "double_well": (
        lambda seed, dim: _double_well(dim),
        10,
        {"steps": 200, "batch": 128},
    ),
    "pis_mixture_d2": (
        lambda seed, dim: _pis_mixture(dim),
        2,
        {"steps": 100, "batch": 128},
    ),
}

SETTING_NAMES = tuple(_REGISTRY)


def make_setting(name: str, seed: int = 0, dim: int | None = None):
    """Build a registered setting. Returns (ProblemSpec, default hyperparameters).

    `dim` overrides the setting's default dimension for desk-scale runs. The PIS
    mixture also accepts its dimension in the name, e.g. "pis_mixture_d4".
    """
    key = name
    if key not in _REGISTRY:
        pis = re.fullmatch(r"pis_mixture_d(\d+)", name)
        if pis:
            key = "pis_mixture_d2"
            if dim is None:
                dim = int(pis.group(1))
        else:
            raise ConfigError(
                f"unknown setting {name!r}; valid settings: {', '.join(SETTING_NAMES)}"
            )
    builder, default_dim, defaults = _REGISTRY[key]
    d = default_dim if dim is None else int(dim)
    if d < 1:
        raise ConfigError(f"setting dimension must be >= 1, got {d}")
    spec = builder(seed, d)
    return spec, dict(defaults)
