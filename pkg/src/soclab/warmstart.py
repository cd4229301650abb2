"""Gaussian-marginal warm start: linear splines (mu, Gamma) trained on the
control objective and exposed as a closed-form control.

The path family is Y_t = mu(t) + sqrt(t) Gamma(t) Z with one standard normal
Z per trajectory, so every trajectory is a deterministic curve in t given Z.
The control that produces these marginals has the closed form implemented by
`gaussian_control`; training therefore never simulates the SDE, it evaluates
the discretized control objective directly on the reparameterized curves and
descends the spline knots with Adam.

Gamma is parameterized as sigma(0) plus an unconstrained offset per knot, with
the offset of knot 0 pinned to zero: Gamma(0) = sigma(0) is required for the
control to stay finite as t -> 0 (the (I - sigma sigma^T Sigma^-1)/(2t) factor
then vanishes at the origin).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .errors import ContractError, SplineError, WarmStartError, CheckpointError
from .nets import Adam, save_checkpoint, load_checkpoint

__all__ = [
    "GaussianSplinePath",
    "spline_eval",
    "gaussian_control",
    "rgsoc_train",
    "make_initial_path",
    "save_warmstart",
    "load_warmstart",
    "EPS_T",
    "COND_LIMIT",
]

EPS_T = 1e-4       # clamp for the 1/(2t) factor near the initial time
COND_LIMIT = 1e6   # maximum condition number of a Gamma knot


@dataclass
class GaussianSplinePath:
    """Piecewise-linear mean and covariance-factor splines on [0, T].

    Knot b of Gamma is sigma0 + gamma_offsets[b-1]; knot 0 is exactly sigma0
    (frozen, not a parameter).
    """

    horizon: float
    mu_knots: np.ndarray       # (B+1, d)
    gamma_offsets: np.ndarray  # (B, d, d)
    sigma0: np.ndarray         # (d, d)

    @property
    def knots(self) -> int:
        return self.mu_knots.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.mu_knots.shape[1]

    @property
    def delta(self) -> float:
        return self.horizon / self.knots

    def gamma_knot(self, b: int) -> np.ndarray:
        if b == 0:
            return self.sigma0
        return self.sigma0 + self.gamma_offsets[b - 1]

    def validate(self):
        if self.mu_knots.shape[0] < 2:
            raise ContractError("spline needs at least one segment")
        if self.gamma_offsets.shape != (self.knots, self.dim, self.dim):
            raise ContractError(
                f"gamma_offsets shape {self.gamma_offsets.shape} does not match "
                f"{self.knots} knots in dimension {self.dim}")
        for b in range(self.knots + 1):
            cond = np.linalg.cond(self.gamma_knot(b))
            if not np.isfinite(cond) or cond > COND_LIMIT:
                raise SplineError(
                    f"Gamma knot {b} has condition number {cond:.3g} > {COND_LIMIT:g}")
        return self


def make_initial_path(spec, knots: int = 20) -> GaussianSplinePath:
    """Constant-mu, Gamma = sigma(0) initialization."""
    d = spec.dim
    if spec.initial_law.is_point:
        center = np.asarray(spec.initial_law.point, dtype=float)
    else:
        center = np.zeros(d)
    sigma0 = np.asarray(spec.diffusion(0.0), dtype=float)
    return GaussianSplinePath(
        horizon=spec.horizon,
        mu_knots=np.tile(center, (knots + 1, 1)),
        gamma_offsets=np.zeros((knots, d, d)),
        sigma0=sigma0,
    ).validate()


def _segment(path: GaussianSplinePath, t: float) -> tuple[int, float]:
    if not 0.0 <= t <= path.horizon + 1e-12:
        raise ContractError(f"spline time {t!r} outside [0, {path.horizon}]")
    b = int(np.floor(t / path.delta))
    b = min(max(b, 0), path.knots - 1)  # t = T falls in the last segment
    w = (t - b * path.delta) / path.delta
    return b, w


def spline_eval(path: GaussianSplinePath, t) -> tuple[np.ndarray, np.ndarray,
                                                      np.ndarray, np.ndarray]:
    """(mu, d/dt mu, Gamma, d/dt Gamma) at time t: piecewise-linear values,
    piecewise-constant derivatives."""
    b, w = _segment(path, float(t))
    mu_lo, mu_hi = path.mu_knots[b], path.mu_knots[b + 1]
    g_lo, g_hi = path.gamma_knot(b), path.gamma_knot(b + 1)
    mu = (1.0 - w) * mu_lo + w * mu_hi
    gam = (1.0 - w) * g_lo + w * g_hi
    return mu, (mu_hi - mu_lo) / path.delta, gam, (g_hi - g_lo) / path.delta


def gaussian_control(spec, path: GaussianSplinePath, x: np.ndarray, t) -> np.ndarray:
    """Control whose flow reproduces the spline's Gaussian marginals:

        u(x,t) = sigma(t)^-1 ( d/dt mu
                               + [ (d/dt Gamma) Gamma^-1
                                   + (I - sigma sigma^T (Gamma Gamma^T)^-1) / (2t) ]
                                 (x - mu)
                               - b(x,t) )

    The 1/(2t) factor is clamped at t = EPS_T below that time; with
    Gamma(0) = sigma(0) the bracket stays bounded as t -> 0.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    rows = np.atleast_2d(x)
    t = float(t)
    mu, dmu, gam, dgam = spline_eval(path, t)
    cond = np.linalg.cond(gam)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SplineError(f"Gamma({t}) has condition number {cond:.3g} > {COND_LIMIT:g}")
    d = path.dim
    sig = np.asarray(spec.diffusion(t), dtype=float)
    sig_inv = np.asarray(spec.diffusion_inv(t), dtype=float)
    t_eff = max(t, EPS_T)
    factor = (dgam @ np.linalg.inv(gam)
              + (np.eye(d) - (sig @ sig.T) @ np.linalg.inv(gam @ gam.T)) / (2.0 * t_eff))
    inner = dmu + (rows - mu) @ factor.T - np.asarray(spec.drift(rows, t), dtype=float)
    out = inner @ sig_inv.T
    return out[0] if single else out


# --- traced twin used by training -------------------------------------------

def _spline_vars(path, mu_var, gamma_off_var, t: float):
    """Traced spline_eval; gamma_off_var is (B+1, d, d) with row 0 frozen zero."""
    b, w = _segment(path, t)
    mu_lo = ad.getitem(mu_var, b)
    mu_hi = ad.getitem(mu_var, b + 1)
    mu_t = ad.add(ad.mul(mu_lo, 1.0 - w), ad.mul(mu_hi, w))
    dmu_t = ad.mul(ad.sub(mu_hi, mu_lo), 1.0 / path.delta)
    off_lo = ad.getitem(gamma_off_var, b)
    off_hi = ad.getitem(gamma_off_var, b + 1)
    # knot matrix = sigma0 + offset, and interpolation is affine in the offsets
    g_t = ad.add(ad.add(ad.mul(off_lo, 1.0 - w), ad.mul(off_hi, w)), path.sigma0)
    dg_t = ad.mul(ad.sub(off_hi, off_lo), 1.0 / path.delta)
    return mu_t, dmu_t, g_t, dg_t


def _y_and_control(spec, path, mu_var, gamma_off_var, z: np.ndarray, t: float):
    """Y_t = mu + sqrt(t) Gamma z and the induced control, both traced."""
    d = path.dim
    mu_t, dmu_t, g_t, dg_t = _spline_vars(path, mu_var, gamma_off_var, t)
    y = ad.add(ad.mul(ad.matmul(z, ad.swapaxes(g_t, 0, 1)), float(np.sqrt(t))), mu_t)

    sig = np.asarray(spec.diffusion(t), dtype=float)
    sig_inv = np.asarray(spec.diffusion_inv(t), dtype=float)
    t_eff = max(t, EPS_T)
    gg_t = ad.matmul(g_t, ad.swapaxes(g_t, 0, 1))
    factor = ad.add(
        ad.matmul(dg_t, ad.matrix_inv(g_t)),
        ad.mul(ad.sub(np.eye(d), ad.matmul(sig @ sig.T, ad.matrix_inv(gg_t))),
               1.0 / (2.0 * t_eff)))

    jac = np.asarray(spec.drift_jacobian(y.value, t), dtype=float)
    b_lift = ad.lift(y, np.asarray(spec.drift(y.value, t), dtype=float),
                     lambda gr, jac=jac: np.einsum("mij,mj->mi", jac, gr))
    inner = ad.sub(ad.add(ad.matmul(ad.sub(y, mu_t), ad.swapaxes(factor, 0, 1)), dmu_t),
                   b_lift)
    u = ad.matmul(inner, sig_inv.T)
    return y, u


def rgsoc_train(spec, path: GaussianSplinePath | None = None, iters: int = 2000,
                m: int = 512, steps: int = 200, lr: float = 3e-4,
                rng: np.random.Generator | None = None,
                knots: int = 20) -> tuple[GaussianSplinePath, list[float]]:
    """Adam on the spline knots against the Monte Carlo control objective.

    Each iteration samples fresh Z, builds Y_(i,j) = mu(t_j) + sqrt(t_j)
    Gamma(t_j) Z_i on the left-endpoint grid, evaluates the induced control,
    and descends  mean_i [ dt sum_j (1/2 ||u||^2 + f)(Y_ij, t_j) + g(Y_iT) ].
    Returns the trained path and the EMA objective history (coefficient 0.02,
    one entry per iteration). Objectives above 1e8 or non-finite raise
    WarmStartError; callers may fall back to no warm start.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if path is None:
        path = make_initial_path(spec, knots)
    path.validate()
    d = path.dim
    horizon = spec.horizon
    dt = horizon / steps
    times = np.arange(steps) * dt

    params = {
        "mu_knots": path.mu_knots.astype(float).copy(),
        "gamma_offsets": path.gamma_offsets.astype(float).copy(),
    }
    opt = Adam(params, lr=lr)
    history: list[float] = []
    ema = None

    for _ in range(iters):
        z = rng.standard_normal((m, d))
        tape = Tape()
        mu_var = tape.leaf(params["mu_knots"])
        off_var = tape.leaf(params["gamma_offsets"])
        # prepend the frozen zero offset of knot 0
        gamma_off = ad.concat([np.zeros((1, d, d)), off_var], axis=0)

        total = None
        for t in times:
            y, u = _y_and_control(spec, path, mu_var, gamma_off, z, float(t))
            f_grad = np.asarray(spec.state_cost_grad(y.value, t), dtype=float)
            f_lift = ad.lift(y, np.asarray(spec.state_cost(y.value, t), dtype=float),
                             lambda gr, fg=f_grad: gr[..., None] * fg)
            c = ad.add(ad.mul(ad.vsum(ad.square(u), axis=1), 0.5), f_lift)
            total = c if total is None else ad.add(total, c)

        y_T, _ = _y_and_control(spec, path, mu_var, gamma_off, z, horizon)
        g_grad = np.asarray(spec.terminal_cost_grad(y_T.value), dtype=float)
        g_lift = ad.lift(y_T, np.asarray(spec.terminal_cost(y_T.value), dtype=float),
                         lambda gr, gg=g_grad: gr[..., None] * gg)
        loss = ad.vmean(ad.add(ad.mul(total, dt), g_lift))

        value = float(loss.value)
        if not np.isfinite(value) or value > 1e8:
            raise WarmStartError(
                f"warm-start objective diverged ({value!r}); fall back to no warm start")
        grads = tape.gradient(loss, [mu_var, off_var])
        opt.step({"mu_knots": grads[0], "gamma_offsets": grads[1]})
        ema = value if ema is None else (1.0 - 0.02) * ema + 0.02 * value
        history.append(float(ema))

    trained = GaussianSplinePath(horizon=horizon, mu_knots=params["mu_knots"],
                                 gamma_offsets=params["gamma_offsets"],
                                 sigma0=path.sigma0)
    trained.validate()
    return trained, history


def save_warmstart(file_path, path: GaussianSplinePath):
    save_checkpoint(file_path, architecture={
        "kind": "gaussian_spline",
        "dim": path.dim,
        "knots": path.knots,
        "horizon": path.horizon,
    }, groups={"warmstart": {
        "mu_knots": path.mu_knots,
        "gamma_offsets": path.gamma_offsets,
        "sigma0": path.sigma0,
    }})


def load_warmstart(file_path) -> GaussianSplinePath:
    architecture, groups = load_checkpoint(file_path)
    if architecture.get("kind") != "gaussian_spline":
        raise CheckpointError(
            f"checkpoint {file_path} holds {architecture.get('kind')!r}, "
            "not a warm-start spline")
    g = groups["warmstart"]
    path = GaussianSplinePath(horizon=float(architecture["horizon"]),
                              mu_knots=g["mu_knots"],
                              gamma_offsets=g["gamma_offsets"],
                              sigma0=g["sigma0"])
    return path.validate()
