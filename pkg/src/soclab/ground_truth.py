"""Reference optimal controls and values for the benchmark settings.

Linear-quadratic settings get a backward Riccati solve (classical RK4,
symmetrized each step) plus the value offset ODE; the linear-terminal OU
setting has a closed form through the matrix exponential; the double-well
setting reduces per coordinate to a 1D linear PDE after the exponential
change of variables phi = exp(-V/lambda), solved by Crank-Nicolson with
central differences and homogeneous Neumann walls. A Monte Carlo oracle
estimates values and controls directly from the conditional-expectation
representation for cross-checks.

All solutions are immutable tables; lookups interpolate (linear in t,
bilinear in (x, t) for the PDE tables).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from .errors import (ConfigError, ContractError, DegenerateOracleError,
                     HorizonError, ResolutionError)

__all__ = [
    "RiccatiSolution", "riccati_solve", "lqr_optimal_control", "lqr_value",
    "matrix_exponential", "linear_ou_optimal_control", "linear_ou_value_table",
    "HJBGrid1D", "double_well_solve_1d", "DoubleWellSolution",
    "OracleEstimate", "value_mc_oracle", "make_ground_truth",
    "LqrGroundTruth", "LinearOuGroundTruth",
]


# ---------------------------------------------------------------------------
# Riccati / LQR


@dataclass
class RiccatiSolution:
    times: np.ndarray    # (n,), ascending, times[-1] = T
    F: np.ndarray        # (n, d, d), symmetric PSD
    c_unit: np.ndarray   # (n,), value offset per unit noise level
    sigma0: np.ndarray

    def interp_F(self, t: float) -> np.ndarray:
        return _interp_matrix(self.times, self.F, t)

    def interp_c(self, t: float) -> float:
        return float(np.interp(t, self.times, self.c_unit))


def _interp_matrix(times: np.ndarray, table: np.ndarray, t: float) -> np.ndarray:
    t = float(t)
    if not times[0] <= t <= times[-1] + 1e-12:
        raise ContractError(f"t={t} outside solution range [{times[0]}, {times[-1]}]")
    idx = min(int(np.searchsorted(times, t, side="right")) - 1, len(times) - 2)
    idx = max(idx, 0)
    h = times[idx + 1] - times[idx]
    frac = (t - times[idx]) / h
    return (1.0 - frac) * table[idx] + frac * table[idx + 1]


def riccati_solve(A: np.ndarray, P: np.ndarray, Q: np.ndarray, sigma0: np.ndarray,
                  horizon: float, steps: int = 10_000) -> RiccatiSolution:
    """Backward solve of dF/dt + A^T F + F A - 2 F sigma0 sigma0^T F + P = 0,
    F(T) = Q, jointly with the unit-noise offset dc/dt = -tr(sigma0 sigma0^T F).
    """
    A = np.asarray(A, dtype=float)
    P = np.asarray(P, dtype=float)
    Q = np.asarray(Q, dtype=float)
    sigma0 = np.asarray(sigma0, dtype=float)
    d = A.shape[0]
    if steps < 100:
        raise ContractError("riccati_solve requires steps >= 100")
    if not np.allclose(Q, Q.T, atol=1e-10):
        raise ContractError("terminal weight Q must be symmetric")
    if np.linalg.eigvalsh(Q).min() < -1e-10:
        raise ContractError("terminal weight Q must be PSD")
    S = sigma0 @ sigma0.T
    dt = horizon / steps

    def rhs(F):
        # derivative in tau = T - t (backward variable)
        dF = A.T @ F + F @ A - 2.0 * F @ S @ F + P
        dc = float(np.trace(S @ F))
        return dF, dc

    n = steps + 1
    F_tab = np.empty((n, d, d))
    c_tab = np.empty(n)
    F = Q.copy()
    c = 0.0
    F_tab[-1] = F
    c_tab[-1] = c
    for i in range(steps):
        k1F, k1c = rhs(F)
        k2F, k2c = rhs(F + 0.5 * dt * k1F)
        k3F, k3c = rhs(F + 0.5 * dt * k2F)
        k4F, k4c = rhs(F + dt * k3F)
        F = F + (dt / 6.0) * (k1F + 2.0 * k2F + 2.0 * k3F + k4F)
        F = 0.5 * (F + F.T)
        c = c + (dt / 6.0) * (k1c + 2.0 * k2c + 2.0 * k3c + k4c)
        if np.abs(F).max() > 1e8:
            raise HorizonError(
                "Riccati solution blew up; shorten the horizon or weaken the costs")
        F_tab[-(i + 2)] = F
        c_tab[-(i + 2)] = c
    times = np.arange(n) * dt
    times[-1] = horizon
    return RiccatiSolution(times=times, F=F_tab, c_unit=c_tab, sigma0=sigma0)


def lqr_optimal_control(ric: RiccatiSolution, sigma0: np.ndarray, x: np.ndarray,
                        t: float) -> np.ndarray:
    """u*(x, t) = -2 sigma0^T F(t) x, rows of x."""
    F = ric.interp_F(t)
    x = np.asarray(x, dtype=float)
    return -2.0 * x @ (F.T @ np.asarray(sigma0, dtype=float))


def lqr_value(ric: RiccatiSolution, x: np.ndarray, t: float,
              noise_level: float) -> np.ndarray:
    """V(x, t) = x^T F(t) x + lambda * c_unit(t), rows of x."""
    F = ric.interp_F(t)
    x = np.asarray(x, dtype=float)
    quad = np.einsum("mi,ij,mj->m", x, F, x)
    return quad + noise_level * ric.interp_c(t)


# ---------------------------------------------------------------------------
# Matrix exponential (scaling and squaring, Pade [6/6])

_PADE6 = np.array([1.0, 1.0 / 2.0, 5.0 / 44.0, 1.0 / 66.0, 1.0 / 792.0,
                   1.0 / 15840.0, 1.0 / 665280.0])


def matrix_exponential(A: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ContractError("matrix_exponential expects a square matrix")
    d = A.shape[0]
    if d > 64:
        raise ContractError("matrix_exponential supports d <= 64")
    norm = np.abs(A).sum(axis=0).max()  # 1-norm
    s = max(0, int(np.ceil(np.log2(norm / 0.5))) if norm > 0.5 else 0)
    B = A / (2.0 ** s)
    eye = np.eye(d)
    B2 = B @ B
    B4 = B2 @ B2
    U = B @ (_PADE6[1] * eye + _PADE6[3] * B2 + _PADE6[5] * B4)
    V = _PADE6[0] * eye + _PADE6[2] * B2 + _PADE6[4] * B4 + _PADE6[6] * (B4 @ B2)
    E = np.linalg.solve(V - U, V + U)
    for _ in range(s):
        E = E @ E
    return E


def linear_ou_optimal_control(A: np.ndarray, sigma0: np.ndarray, gamma: np.ndarray,
                              horizon: float, x: np.ndarray, t: float) -> np.ndarray:
    """u*(x, t) = -sigma0^T exp(A^T (T - t)) gamma, independent of x."""
    A = np.asarray(A, dtype=float)
    sigma0 = np.asarray(sigma0, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    u = -sigma0.T @ matrix_exponential(A.T * (horizon - t)) @ gamma
    x = np.asarray(x, dtype=float)
    return np.broadcast_to(u, x.shape).copy()


def linear_ou_value_table(A, sigma0, gamma, horizon: float, noise_level: float,
                          n_grid: int = 801):
    """Returns value(x, t) for the linear-terminal OU problem.

    V(x, t) = <gamma, e^{A(T-t)} x> - (1/2) gamma^T Sigma(t) gamma with
    Sigma(t) = int_t^T e^{A(T-s)} sigma0 sigma0^T e^{A^T(T-s)} ds; the
    quadrature is a cumulative trapezoid on a fixed grid. The noise level
    cancels: the lambda in the Gaussian moment kills the 1/lambda in -lam*log.
    """
    A = np.asarray(A, dtype=float)
    sigma0 = np.asarray(sigma0, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    ts = np.linspace(0.0, horizon, n_grid)
    expms = np.stack([matrix_exponential(A * (horizon - s)) for s in ts])
    integrand = np.einsum("nij,jk,nlk->nil", expms, sigma0 @ sigma0.T, expms)
    # backward cumulative trapezoid: Sigma[n] = int_{ts[n]}^T integrand ds
    dt = ts[1] - ts[0]
    sigma_tab = np.zeros_like(integrand)
    for n in range(n_grid - 2, -1, -1):
        sigma_tab[n] = sigma_tab[n + 1] + 0.5 * dt * (integrand[n] + integrand[n + 1])

    def value(x: np.ndarray, t: float) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        lin = x @ (matrix_exponential(A * (horizon - t)) .T @ gamma)
        quad = float(gamma @ _interp_matrix(ts, sigma_tab, t) @ gamma)
        return lin - 0.5 * quad

    return value


# ---------------------------------------------------------------------------
# Double well: per-coordinate 1D HJB through the exponential transform


@dataclass
class HJBGrid1D:
    xs: np.ndarray       # (n_x,)
    ts: np.ndarray       # (n_t,), ascending, ts[-1] = T
    phi: np.ndarray      # (n_t, n_x), positive
    u_star: np.ndarray   # (n_t, n_x)
    value: np.ndarray    # (n_t, n_x)
    kappa: float
    nu: float
    noise_level: float

    def control(self, x, t: float) -> np.ndarray:
        return self._lookup(self.u_star, x, t)

    def value_at(self, x, t: float) -> np.ndarray:
        return self._lookup(self.value, x, t)

    def _lookup(self, table: np.ndarray, x, t: float) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        xs, ts = self.xs, self.ts
        xq = np.clip(x, xs[0], xs[-1])
        t = min(max(float(t), ts[0]), ts[-1])
        it = min(int(np.searchsorted(ts, t, side="right")) - 1, len(ts) - 2)
        it = max(it, 0)
        wt = (t - ts[it]) / (ts[it + 1] - ts[it])
        ix = np.minimum(np.searchsorted(xs, xq, side="right") - 1, len(xs) - 2)
        ix = np.maximum(ix, 0)
        wx = (xq - xs[ix]) / (xs[ix + 1] - xs[ix])
        lo = (1.0 - wx) * table[it, ix] + wx * table[it, ix + 1]
        hi = (1.0 - wx) * table[it + 1, ix] + wx * table[it + 1, ix + 1]
        return (1.0 - wt) * lo + wt * hi


def double_well_solve_1d(kappa: float, nu: float, noise_level: float,
                         horizon: float, half_width: float = 4.0,
                         n_x: int = 2001, n_t: int = 2001) -> HJBGrid1D:
    """Solve the 1D transformed equation dphi/dt + b dphi/dx + (lam/2) d2phi/dx2 = 0
    backward from phi(x, T) = exp(-g(x)/lam), b(x) = -4 kappa x (x^2 - 1),
    g(x) = nu (x^2 - 1)^2. Crank-Nicolson + central differences + Neumann walls.
    """
    if half_width < 3.0:
        raise ContractError("double_well_solve_1d requires a domain half-width >= 3")
    if n_x < 500:
        raise ContractError("double_well_solve_1d requires n_x >= 500")
    lam = noise_level
    xs = np.linspace(-half_width, half_width, n_x)
    ts = np.linspace(0.0, horizon, n_t)
    h = xs[1] - xs[0]
    dt = ts[1] - ts[0]
    b = -4.0 * kappa * xs * (xs * xs - 1.0)

    # spatial operator L as tridiagonal bands (lower, diag, upper)
    lower = -b / (2.0 * h) + lam / (2.0 * h * h)
    diag = np.full(n_x, -lam / (h * h))
    upper = b / (2.0 * h) + lam / (2.0 * h * h)
    # Neumann via ghost reflection: advective term vanishes, Laplacian doubles
    upper_b = np.array([lam / (h * h)])
    lower_b = np.array([lam / (h * h)])

    up = np.concatenate([upper_b, upper[1:-1]])          # superdiag, length n_x-1
    lo = np.concatenate([lower[1:-1], lower_b])          # subdiag, length n_x-1

    # banded LHS of (I - dt/2 L), rows: super, diag, sub
    ab = np.zeros((3, n_x))
    ab[0, 1:] = -0.5 * dt * up
    ab[1, :] = 1.0 - 0.5 * dt * diag
    ab[2, :-1] = -0.5 * dt * lo

    def apply_rhs(phi):
        out = (1.0 + 0.5 * dt * diag) * phi
        out[:-1] += 0.5 * dt * up * phi[1:]
        out[1:] += 0.5 * dt * lo * phi[:-1]
        return out

    phi = np.empty((n_t, n_x))
    g = nu * (xs * xs - 1.0) ** 2
    phi[-1] = np.exp(-g / lam)
    for n in range(n_t - 2, -1, -1):
        phi[n] = solve_banded((1, 1), ab, apply_rhs(phi[n + 1]))
        if phi[n].min() <= 0.0:
            raise ResolutionError(
                f"phi lost positivity at t={ts[n]:.4g}; refine the grid "
                f"(n_x={n_x}, n_t={n_t})")

    u_star = np.zeros_like(phi)
    u_star[:, 1:-1] = lam * (phi[:, 2:] - phi[:, :-2]) / (2.0 * h * phi[:, 1:-1])
    # Neumann walls: dphi/dx = 0 there, so the control vanishes
    value = -lam * np.log(phi)
    return HJBGrid1D(xs=xs, ts=ts, phi=phi, u_star=u_star, value=value,
                     kappa=float(kappa), nu=float(nu), noise_level=lam)


class DoubleWellSolution:
    """Vector control for the separable double well: one 1D table per distinct
    (kappa, nu) pair, applied coordinatewise."""

    def __init__(self, kappa: np.ndarray, nu: np.ndarray, noise_level: float,
                 horizon: float, **grid_kwargs):
        self.kappa = np.asarray(kappa, dtype=float)
        self.nu = np.asarray(nu, dtype=float)
        self.tables: dict[tuple, HJBGrid1D] = {}
        self.coord_key: list[tuple] = []
        for k, v in zip(self.kappa, self.nu):
            key = (float(k), float(v))
            if key not in self.tables:
                self.tables[key] = double_well_solve_1d(
                    k, v, noise_level, horizon, **grid_kwargs)
            self.coord_key.append(key)

    def control(self, x: np.ndarray, t: float) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.empty_like(x)
        for j, key in enumerate(self.coord_key):
            out[:, j] = self.tables[key].control(x[:, j], t)
        return out

    def value(self, x: np.ndarray, t: float) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        total = np.zeros(x.shape[0])
        for j, key in enumerate(self.coord_key):
            total += self.tables[key].value_at(x[:, j], t)
        return total


# ---------------------------------------------------------------------------
# Monte Carlo oracle


@dataclass
class OracleEstimate:
    value: float
    value_se: float
    control: np.ndarray
    control_se: np.ndarray
    mean_weight: float


def value_mc_oracle(spec, x: np.ndarray, t: float, m: int,
                    rng: np.random.Generator, steps: int = 200) -> OracleEstimate:
    """V and u* at a single point from the conditional-expectation form.

    V-hat = -lam log mean(exp(-W/lam)) over uncontrolled paths from (x, t);
    u-hat = sigma^T mean(weight * bracket) / mean(weight) with the identity
    reparameterization bracket; standard errors by the delta method.
    """
    from .losses import pathwise_grad_estimator
    from .nets import IdentityMatrices

    lam = spec.noise_level
    est = pathwise_grad_estimator(spec, x, t, IdentityMatrices(spec.dim), m, rng,
                                  steps=steps)
    if est.mean_weight <= 0.0 or not np.isfinite(est.mean_weight):
        raise DegenerateOracleError(
            "all Monte Carlo weights vanished; the oracle cannot normalize")
    value = -lam * np.log(est.mean_weight)
    value_se = lam * est.weight_se / est.mean_weight
    sigma = spec.diffusion(t)
    # u* = lam sigma^T grad log E = lam sigma^T (grad E / E)
    ratio = est.estimate / est.mean_weight
    control = lam * (sigma.T @ ratio)
    # delta method for the ratio, then the linear map through lam sigma^T:
    # Var(n_i/w) ~ (Var n_i - 2 r_i Cov(n_i, w) + r_i^2 Var w) / w^2
    ratio_var = (est.se ** 2 - 2.0 * ratio * est.cov_grad_weight
                 + (ratio * est.weight_se) ** 2) / est.mean_weight ** 2
    ratio_var = np.maximum(ratio_var, 0.0)
    control_se = lam * np.sqrt((sigma.T ** 2) @ ratio_var)
    return OracleEstimate(value=float(value), value_se=float(value_se),
                          control=control, control_se=control_se,
                          mean_weight=float(est.mean_weight))


# ---------------------------------------------------------------------------
# Per-setting assembly and caching


class LqrGroundTruth:
    def __init__(self, ric: RiccatiSolution, noise_level: float):
        self.ric = ric
        self.noise_level = noise_level

    def control(self, x: np.ndarray, t: float) -> np.ndarray:
        return lqr_optimal_control(self.ric, self.ric.sigma0, x, t)

    def value(self, x: np.ndarray, t: float) -> np.ndarray:
        return lqr_value(self.ric, x, t, self.noise_level)


class LinearOuGroundTruth:
    def __init__(self, A, sigma0, gamma, horizon: float, noise_level: float):
        self.A = np.asarray(A, dtype=float)
        self.sigma0 = np.asarray(sigma0, dtype=float)
        self.gamma = np.asarray(gamma, dtype=float)
        self.horizon = horizon
        self._value = linear_ou_value_table(A, sigma0, gamma, horizon, noise_level)

    def control(self, x: np.ndarray, t: float) -> np.ndarray:
        return linear_ou_optimal_control(self.A, self.sigma0, self.gamma,
                                         self.horizon, x, t)

    def value(self, x: np.ndarray, t: float) -> np.ndarray:
        return self._value(x, t)


def make_ground_truth(spec, riccati_steps: int = 10_000, **dw_kwargs):
    """Dispatch on the problem's coefficient set; raises ConfigError when no
    reference solution exists for the setting (the normalizing-flow sampler)."""
    co = spec.coefficients
    if {"A", "P", "Q", "sigma0"} <= set(co):
        ric = riccati_solve(co["A"], co["P"], co["Q"], co["sigma0"],
                            spec.horizon, steps=riccati_steps)
        return LqrGroundTruth(ric, spec.noise_level)
    if {"A", "sigma0", "gamma"} <= set(co):
        return LinearOuGroundTruth(co["A"], co["sigma0"], co["gamma"],
                                   spec.horizon, spec.noise_level)
    if {"kappa", "nu"} <= set(co):
        return DoubleWellSolution(co["kappa"], co["nu"], spec.noise_level,
                                  spec.horizon, **dw_kwargs)
    raise ConfigError(f"no ground-truth solution available for {spec.name}")


def save_ground_truth_cache(path, spec, gt) -> None:
    """Binary cache of the solved tables, keyed by setting and resolution."""
    payload: dict[str, np.ndarray] = {"setting": np.frombuffer(
        spec.name.encode(), dtype=np.uint8)}
    if isinstance(gt, LqrGroundTruth):
        payload["kind"] = np.frombuffer(b"lqr", dtype=np.uint8)
        payload["times"] = gt.ric.times
        payload["F"] = gt.ric.F
        payload["c_unit"] = gt.ric.c_unit
        payload["sigma0"] = gt.ric.sigma0
    elif isinstance(gt, DoubleWellSolution):
        payload["kind"] = np.frombuffer(b"double_well", dtype=np.uint8)
        for i, (key, tab) in enumerate(sorted(gt.tables.items())):
            payload[f"xs{i}"] = tab.xs
            payload[f"ts{i}"] = tab.ts
            payload[f"phi{i}"] = tab.phi
            payload[f"kappa_nu{i}"] = np.array(key)
    else:
        raise ConfigError("only LQR and double-well tables are cached")
    np.savez_compressed(path, **payload)


def load_ground_truth_cache(path, spec):
    with np.load(path) as blob:
        name = bytes(blob["setting"]).decode()
        if name != spec.name:
            raise ConfigError(
                f"cache was built for setting {name!r}, not {spec.name!r}")
        kind = bytes(blob["kind"]).decode()
        if kind == "lqr":
            ric = RiccatiSolution(times=blob["times"], F=blob["F"],
                                  c_unit=blob["c_unit"], sigma0=blob["sigma0"])
            return LqrGroundTruth(ric, spec.noise_level)
        gt = DoubleWellSolution.__new__(DoubleWellSolution)
        gt.kappa = spec.coefficients["kappa"]
        gt.nu = spec.coefficients["nu"]
        gt.tables = {}
        gt.coord_key = []
        i = 0
        while f"phi{i}" in blob.files:
            key = tuple(blob[f"kappa_nu{i}"])
            xs, ts, phi = blob[f"xs{i}"], blob[f"ts{i}"], blob[f"phi{i}"]
            lam = spec.noise_level
            h = xs[1] - xs[0]
            u_star = np.zeros_like(phi)
            u_star[:, 1:-1] = lam * (phi[:, 2:] - phi[:, :-2]) / (2.0 * h * phi[:, 1:-1])
            tab = HJBGrid1D(xs=xs, ts=ts, phi=phi, u_star=u_star,
                            value=-lam * np.log(phi), kappa=key[0], nu=key[1],
                            noise_level=lam)
            gt.tables[key] = tab
            i += 1
        for k, v in zip(gt.kappa, gt.nu):
            gt.coord_key.append((float(k), float(v)))
        return gt
