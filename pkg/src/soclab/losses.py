"""Training losses, the matching vector field, and gradient estimators.

Every loss returns a LossValue: the scalar Monte Carlo estimate plus
gradients per parameter group ("control", "matrices", "y0"). Trajectories
are always data here -- only the adjoint loss receives a tape-recorded
rollout, and it is the only loss whose gradient flows through the dynamics.
Importance weights never carry gradient.

The matching field

  w(t_k) = sigma(t_k)^T [ - sum_{j>=k} M_{t_k}(t_j) grad_f_j dt
                          - M_{t_k}(T) grad_g
                          + sum_{j>=k} (M_{t_k}(t_j) grad_b_j - dsM_{t_k}(t_j))
                            (sigma^-1)^T (v_j dt + sqrt(lam) dB_j) ]

costs O(m K^2) per batch for a learned M. The pair matrices are assembled in
one flat evaluation over the (k, j >= k) grid and contracted against
per-trajectory vectors with batched matmuls; the sum over j for each k is a
single selector matmul. M = Identity collapses to suffix sums. The Jacobian
orientation inside grad_b follows the problem module's convention (rows index
the differentiation variable), which the finite-difference validation pins.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .errors import ContractError, DegenerateWeightsError
from .sim import TrajectoryBatch, importance_weight, rollout, work_functional

__all__ = [
    "LossValue", "matching_field", "adjoint_matching_field",
    "loss_socm", "loss_socm_with_field", "loss_adjoint", "tilde_Y",
    "loss_cross_entropy", "loss_variance", "loss_log_variance", "loss_moment",
    "optimal_moment_shift", "adjoint_ode_solve", "PathwiseEstimate",
    "pathwise_grad_estimator", "adjoint_grad_estimator",
]


@dataclass
class LossValue:
    value: float
    grads: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    n_saturated: int = 0


class _ZeroPolicy:
    params: dict = {}

    def eval_batch(self, x, t):
        return np.zeros_like(x)

    __call__ = eval_batch


def _weights_or_raise(spec, traj, weights):
    if weights is None:
        weights = importance_weight(spec, traj)
    if weights.n_saturated == traj.states.shape[0]:
        raise DegenerateWeightsError(
            "every importance weight overflowed; the sampling control is "
            "too far from the weight's regime")
    return weights


def _field_ingredients(spec, traj: TrajectoryBatch):
    """Per-step detached quantities shared by the field computations.

    r_j = grad_b_j y_j - dt grad_f_j  (multiplied by M),
    y_j = (sigma^-1)^T (v_j dt + sqrt(lam) dB_j)  (multiplied by dsM),
    plus grad_g at the endpoint.
    """
    m, steps, d = traj.increments.shape
    dt = traj.dt
    sqrt_lam = np.sqrt(spec.noise_level)
    r = np.empty((m, steps, d))
    y = np.empty((m, steps, d))
    for k in range(steps):
        t_k = traj.times[k]
        x_k = traj.states[:, k]
        z = traj.control_values[:, k] * dt + sqrt_lam * traj.increments[:, k]
        y_k = z @ spec.diffusion_inv(t_k)
        jac = spec.drift_jacobian(x_k, t_k)
        r[:, k] = np.einsum("mij,mj->mi", jac, y_k) - dt * spec.state_cost_grad(x_k, t_k)
        y[:, k] = y_k
    grad_g = spec.terminal_cost_grad(traj.states[:, steps])
    return r, y, grad_g


def matching_field(spec, traj: TrajectoryBatch, matrices, tape: Tape | None = None,
                   pvars: dict | None = None):
    """Matching field w at every left endpoint, shape (m, steps, d).

    Identity matrices: plain numpy suffix sums, returns an ndarray. Learned
    matrices with a tape: returns a Var whose gradient reaches the matrix
    parameters. Learned matrices without a tape: ndarray (evaluation only).
    """
    if not traj.detached:
        raise ContractError("matching_field expects a detached trajectory")
    m, steps, d = traj.increments.shape
    r, y, grad_g = _field_ingredients(spec, traj)
    sigma_stack = np.stack([spec.diffusion(traj.times[k]) for k in range(steps)])

    if matrices.is_identity:
        suffix = np.cumsum(r[:, ::-1], axis=1)[:, ::-1]
        bracket = suffix - grad_g[:, None, :]
        return np.einsum("mkd,kde->mke", bracket, sigma_stack)

    kk, jj, ts_pairs, term_pairs = _pair_grid(traj.times, steps)
    n_pairs = kk.shape[0]
    if tape is None:
        m_all, dm_all = matrices.eval_pairs_values(np.concatenate([ts_pairs, term_pairs]))
        m_pairs, dm_pairs = m_all[:n_pairs], dm_all[:n_pairs]
        m_term = m_all[n_pairs:]
        contrib = (np.matmul(r[:, jj].transpose(1, 0, 2), m_pairs.swapaxes(1, 2))
                   - np.matmul(y[:, jj].transpose(1, 0, 2), dm_pairs.swapaxes(1, 2)))
        sel = _segment_selector(kk, steps)
        summed = (sel @ contrib.reshape(n_pairs, m * d)).reshape(steps, m, d)
        term = np.matmul(np.broadcast_to(grad_g, (steps, m, d)), m_term.swapaxes(1, 2))
        res = np.matmul(summed - term, sigma_stack)
        return res.swapaxes(0, 1).copy()

    if pvars is None:
        raise ContractError("taped matching_field requires pvars")
    m_all, dm_all = matrices.forward_pairs(tape, pvars,
                                           np.concatenate([ts_pairs, term_pairs]))
    m_pairs = ad.getitem(m_all, slice(0, n_pairs))
    dm_pairs = ad.getitem(dm_all, slice(0, n_pairs))
    m_term = ad.getitem(m_all, slice(n_pairs, n_pairs + steps))
    r_sel = np.ascontiguousarray(r[:, jj].transpose(1, 0, 2))
    y_sel = np.ascontiguousarray(y[:, jj].transpose(1, 0, 2))
    contrib = ad.sub(ad.matmul(r_sel, ad.swapaxes(m_pairs, 1, 2)),
                     ad.matmul(y_sel, ad.swapaxes(dm_pairs, 1, 2)))
    sel = _segment_selector(kk, steps)
    summed = ad.reshape(ad.matmul(sel, ad.reshape(contrib, (n_pairs, m * d))),
                        (steps, m, d))
    g_tiled = np.broadcast_to(grad_g, (steps, m, d)).copy()
    term = ad.matmul(g_tiled, ad.swapaxes(m_term, 1, 2))
    bracket = ad.sub(summed, term)
    w = ad.matmul(bracket, sigma_stack)
    return ad.swapaxes(w, 0, 1)


def _pair_grid(times: np.ndarray, steps: int):
    kk = np.concatenate([np.full(steps - k, k, dtype=int) for k in range(steps)])
    jj = np.concatenate([np.arange(k, steps) for k in range(steps)])
    ts_pairs = np.stack([times[kk], times[jj]], axis=1)
    term_pairs = np.stack([times[:steps], np.full(steps, times[steps])], axis=1)
    return kk, jj, ts_pairs, term_pairs


def _segment_selector(kk: np.ndarray, steps: int) -> np.ndarray:
    sel = np.zeros((steps, kk.shape[0]))
    sel[kk, np.arange(kk.shape[0])] = 1.0
    return sel


def _policy_on_path(tape: Tape, pvars: dict, policy, traj: TrajectoryBatch) -> Var:
    """Control evaluated at every left endpoint of a detached path: (m, K, d) Var.

    All m*K states go through one batched forward; the row-tiled matmul makes
    the result bitwise identical to per-step evaluation.
    """
    m, steps, d = traj.increments.shape
    x_flat = traj.states[:, :steps].reshape(m * steps, d)
    t_flat = np.tile(traj.times[:steps], m)
    u_flat = policy.forward(tape, pvars, x_flat, t_flat)
    return ad.reshape(u_flat, (m, steps, d))


def _split_grads(tape: Tape, loss: Var, groups: dict[str, dict[str, Var]]):
    flat: list[Var] = []
    index = []
    for gname, pv in groups.items():
        for pname, var in pv.items():
            flat.append(var)
            index.append((gname, pname))
    grads = tape.gradient(loss, flat)
    out: dict[str, dict[str, np.ndarray]] = {g: {} for g in groups}
    for (gname, pname), grad in zip(index, grads):
        out[gname][pname] = grad
    return out


def loss_socm(spec, policy, matrices, traj: TrajectoryBatch,
              weights=None) -> LossValue:
    """E[(1/T) int ||u(X^v_t, t) - w_t||^2 dt * alpha]; gradients reach the
    control through u and the matrix parameters through w."""
    weights = _weights_or_raise(spec, traj, weights)
    if matrices.is_identity:
        fld = matching_field(spec, traj, matrices)
        out = loss_socm_with_field(spec, policy, fld, traj, weights)
        out.grads.setdefault("matrices", {})
        return out
    tape = Tape()
    pv_u = policy.param_vars(tape)
    pv_m = matrices.param_vars(tape)
    u_all = _policy_on_path(tape, pv_u, policy, traj)
    w = matching_field(spec, traj, matrices, tape=tape, pvars=pv_m)
    loss = _weighted_square_mean(spec, traj, u_all, w, weights)
    grads = _split_grads(tape, loss, {"control": pv_u, "matrices": pv_m})
    return LossValue(value=float(loss.value), grads=grads,
                     n_saturated=weights.n_saturated)


def loss_socm_with_field(spec, policy, fld: np.ndarray, traj: TrajectoryBatch,
                         weights=None) -> LossValue:
    """loss_socm against a precomputed target field (identity-M or adjoint)."""
    weights = _weights_or_raise(spec, traj, weights)
    tape = Tape()
    pv_u = policy.param_vars(tape)
    u_all = _policy_on_path(tape, pv_u, policy, traj)
    loss = _weighted_square_mean(spec, traj, u_all, fld, weights)
    grads = _split_grads(tape, loss, {"control": pv_u})
    return LossValue(value=float(loss.value), grads=grads,
                     n_saturated=weights.n_saturated)


def _weighted_square_mean(spec, traj, u_all, w, weights) -> Var:
    m = traj.states.shape[0]
    coef = (weights.values * traj.dt / (spec.horizon * m)).reshape(m, 1, 1)
    diff = ad.sub(u_all, w)
    return ad.vsum(ad.mul(ad.square(diff), coef))


def loss_adjoint(spec, policy, traj: TrajectoryBatch, pvars: dict) -> LossValue:
    """Control objective E[int (||u||^2/2 + f) dt + g(X_T)] differentiated
    through the rollout; requires a traced trajectory under `policy` itself."""
    if traj.detached or traj.tape is None:
        raise ContractError("loss_adjoint needs a rollout with detach=False")
    tape = traj.tape
    m, steps, d = traj.increments.shape
    dt = traj.dt
    total = None
    for k in range(steps):
        x_k = traj.state_nodes[k]
        u_k = traj.control_nodes[k]
        t_k = traj.times[k]
        f_val = spec.state_cost(x_k.value, t_k)
        f_grad = spec.state_cost_grad(x_k.value, t_k)
        f_k = ad.lift(x_k, f_val, lambda g, fg=f_grad: g[:, None] * fg)
        step_cost = ad.add(ad.mul(ad.vsum(ad.square(u_k), axis=1), 0.5), f_k)
        total = step_cost if total is None else ad.add(total, step_cost)
    x_T = traj.state_nodes[steps]
    g_val = spec.terminal_cost(x_T.value)
    g_grad = spec.terminal_cost_grad(x_T.value)
    g_T = ad.lift(x_T, g_val, lambda g, gg=g_grad: g[:, None] * gg)
    loss = ad.vmean(ad.add(ad.mul(total, dt), g_T))
    grads = _split_grads(tape, loss, {"control": pvars})
    return LossValue(value=float(loss.value), grads=grads)


def tilde_Y(spec, policy, traj: TrajectoryBatch) -> np.ndarray:
    """Per-trajectory scalar (plain numpy):
    -lam^-1 int<u,v>dt - lam^-1 int f dt - lam^-1/2 int<u,dB> + (lam^-1/2) int||u||^2 dt
    with the last coefficient being half of lam^-1."""
    u = _eval_policy_values(policy, traj)
    return _tilde_y_from_values(spec, traj, u)


def _eval_policy_values(policy, traj: TrajectoryBatch) -> np.ndarray:
    m, steps, d = traj.increments.shape
    u = np.empty((m, steps, d))
    for k in range(steps):
        u[:, k] = policy.eval_batch(traj.states[:, k], traj.times[k])
    return u


def _f_path_integral(spec, traj: TrajectoryBatch) -> np.ndarray:
    m, steps, _ = traj.increments.shape
    total = np.zeros(m)
    for k in range(steps):
        total += spec.state_cost(traj.states[:, k], traj.times[k])
    return traj.dt * total


def _tilde_y_from_values(spec, traj, u: np.ndarray) -> np.ndarray:
    # mirrors _tilde_y_traced operation by operation so both are bitwise equal
    lam = spec.noise_level
    dt = traj.dt
    m = u.shape[0]
    uv = (u * traj.control_values).reshape(m, -1).sum(axis=1)
    ub = (u * traj.increments).reshape(m, -1).sum(axis=1)
    uu = (u * u).reshape(m, -1).sum(axis=1)
    f_int = _f_path_integral(spec, traj)
    return ((uv * (-dt / lam) + (-f_int / lam))
            + (ub * (-1.0 / np.sqrt(lam)) + uu * (0.5 * dt / lam)))


def _tilde_y_traced(spec, policy, traj, tape: Tape, pv_u: dict) -> Var:
    lam = spec.noise_level
    dt = traj.dt
    m, steps, d = traj.increments.shape
    u_all = _policy_on_path(tape, pv_u, policy, traj)
    flat = (m, steps * d)
    uv = ad.vsum(ad.reshape(ad.mul(u_all, traj.control_values), flat), axis=1)
    ub = ad.vsum(ad.reshape(ad.mul(u_all, traj.increments), flat), axis=1)
    uu = ad.vsum(ad.reshape(ad.square(u_all), flat), axis=1)
    f_int = _f_path_integral(spec, traj)
    return ad.add(
        ad.add(ad.mul(uv, -dt / lam), -f_int / lam),
        ad.add(ad.mul(ub, -1.0 / np.sqrt(lam)), ad.mul(uu, 0.5 * dt / lam)))


def loss_cross_entropy(spec, policy, traj: TrajectoryBatch,
                       weights=None) -> LossValue:
    """E[(-lam^-1/2 int<u,dB> - lam^-1 int<u,v>dt + (lam^-1/2) int||u||^2 dt) alpha],
    the last coefficient being half of lam^-1; gradients reach theta only."""
    weights = _weights_or_raise(spec, traj, weights)
    lam = spec.noise_level
    dt = traj.dt
    m, steps, d = traj.increments.shape
    tape = Tape()
    pv_u = policy.param_vars(tape)
    u_all = _policy_on_path(tape, pv_u, policy, traj)
    flat = (m, steps * d)
    ub = ad.vsum(ad.reshape(ad.mul(u_all, traj.increments), flat), axis=1)
    uv = ad.vsum(ad.reshape(ad.mul(u_all, traj.control_values), flat), axis=1)
    uu = ad.vsum(ad.reshape(ad.square(u_all), flat), axis=1)
    bracket = ad.add(ad.add(ad.mul(ub, -1.0 / np.sqrt(lam)), ad.mul(uv, -dt / lam)),
                     ad.mul(uu, 0.5 * dt / lam))
    loss = ad.vmean(ad.mul(bracket, weights.values))
    grads = _split_grads(tape, loss, {"control": pv_u})
    return LossValue(value=float(loss.value), grads=grads,
                     n_saturated=weights.n_saturated)


def _terminal_shifted_y(spec, policy, traj, tape, pv_u) -> Var:
    lam = spec.noise_level
    g_term = spec.terminal_cost(traj.states[:, traj.num_steps])
    y = _tilde_y_traced(spec, policy, traj, tape, pv_u)
    return ad.add(y, -g_term / lam)


def loss_variance(spec, policy, traj: TrajectoryBatch) -> LossValue:
    """Unbiased batch variance of exp(Y~ - lam^-1 g(X_T))."""
    return _variance_loss(spec, policy, traj, log_form=False)


def loss_log_variance(spec, policy, traj: TrajectoryBatch,
                      unbiased: bool = True) -> LossValue:
    """Batch variance of Y~ - lam^-1 g(X_T); unbiased (m-1 divisor) by default.
    The uncorrected form (m divisor) exists for the algebraic identity with
    the moment loss at its optimal shift."""
    return _variance_loss(spec, policy, traj, log_form=True, unbiased=unbiased)


def _variance_loss(spec, policy, traj, log_form: bool,
                   unbiased: bool = True) -> LossValue:
    m = traj.states.shape[0]
    if m < 2:
        raise ContractError("variance losses need at least two trajectories")
    tape = Tape()
    pv_u = policy.param_vars(tape)
    z = _terminal_shifted_y(spec, policy, traj, tape, pv_u)
    if not log_form:
        z = ad.exp(z)
    dev = ad.sub(z, ad.vmean(z))
    loss = ad.mul(ad.vsum(ad.square(dev)), 1.0 / (m - 1 if unbiased else m))
    grads = _split_grads(tape, loss, {"control": pv_u})
    return LossValue(value=float(loss.value), grads=grads)


def optimal_moment_shift(spec, policy, traj: TrajectoryBatch) -> float:
    """The y0 minimizing the moment loss for fixed u: minus the batch mean of
    Y~ - lam^-1 g(X_T), computed through the same pipeline as the losses."""
    m = traj.states.shape[0]
    lam = spec.noise_level
    z = tilde_Y(spec, policy, traj) + (-spec.terminal_cost(traj.states[:, traj.num_steps]) / lam)
    return float(-(z.sum() * (1.0 / m)))


def loss_moment(spec, policy, y0: dict[str, np.ndarray],
                traj: TrajectoryBatch) -> LossValue:
    """E[(Y~ + y0 - lam^-1 g(X_T))^2]; y0 is a trainable scalar group
    ({"y0": shape-(1,) array})."""
    tape = Tape()
    pv_u = policy.param_vars(tape)
    pv_y = {k: tape.leaf(v) for k, v in y0.items()}
    z = _terminal_shifted_y(spec, policy, traj, tape, pv_u)
    loss = ad.vmean(ad.square(ad.add(z, pv_y["y0"])))
    grads = _split_grads(tape, loss, {"control": pv_u, "y0": pv_y})
    return LossValue(value=float(loss.value), grads=grads)


def adjoint_ode_solve(spec, traj: TrajectoryBatch) -> np.ndarray:
    """Backward-Euler lean adjoint along each frozen path:
    a_K = grad_g(X_K); a_k = a_{k+1} + dt (grad_b(X_k,t_k) a_{k+1} + grad_f(X_k,t_k)).
    Returns (m, K+1, d)."""
    if not traj.detached:
        raise ContractError("adjoint_ode_solve expects a detached trajectory")
    m, steps, d = traj.increments.shape
    dt = traj.dt
    a = np.empty((m, steps + 1, d))
    a[:, steps] = spec.terminal_cost_grad(traj.states[:, steps])
    for k in range(steps - 1, -1, -1):
        x_k = traj.states[:, k]
        t_k = traj.times[k]
        jac = spec.drift_jacobian(x_k, t_k)
        a[:, k] = a[:, k + 1] + dt * (np.einsum("mij,mj->mi", jac, a[:, k + 1])
                                      + spec.state_cost_grad(x_k, t_k))
    return a


def adjoint_matching_field(spec, traj: TrajectoryBatch) -> np.ndarray:
    """Target field -sigma(t_k)^T a_k from the lean adjoint, (m, K, d)."""
    a = adjoint_ode_solve(spec, traj)
    steps = traj.num_steps
    out = np.empty_like(traj.control_values)
    for k in range(steps):
        out[:, k] = -(a[:, k] @ spec.diffusion(traj.times[k]))
    return out


# ---------------------------------------------------------------------------
# Standalone gradient estimators of x -> E[exp(-W/lam) | X_t = x]


@dataclass
class PathwiseEstimate:
    estimate: np.ndarray         # (d,)
    se: np.ndarray               # (d,)
    mean_weight: float
    weight_se: float
    cov_grad_weight: np.ndarray  # (d,), Cov(estimate_i, mean_weight)


def pathwise_grad_estimator(spec, x: np.ndarray, t: float, matrices, m: int,
                            rng: np.random.Generator, steps: int = 100,
                            chunk: int = 16384) -> PathwiseEstimate:
    """Reparameterization estimate of grad_x E[exp(-lam^-1 W(X,t)) | X_t = x]:

      mean of lam^-1 [ -sum_j M_t(s_j) grad_f dt - M_t(T) grad_g
                       + sum_j (M_t grad_b - dsM_t)(sigma^-1)^T sqrt(lam) dB_j ]
              * exp(-lam^-1 W)

    over uncontrolled paths started at x, streamed in chunks of trajectories.
    """
    x = np.asarray(x, dtype=float)
    lam = spec.noise_level
    d = spec.dim
    dt = (spec.horizon - t) / steps
    zero = _ZeroPolicy()

    n = 0
    s_w = 0.0
    s_w2 = 0.0
    s_g = np.zeros(d)
    s_g2 = np.zeros(d)
    s_wg = np.zeros(d)   # sum of w * (w * bracket) for the covariance
    done = 0
    while done < m:
        c = min(chunk, m - done)
        done += c
        inc = rng.standard_normal((c, steps, d)) * np.sqrt(dt)
        traj = rollout(spec, zero, inc, detach=True,
                       x0=np.broadcast_to(x, (c, d)).copy(), t0=t)
        w = np.exp(-work_functional(spec, traj, 0) / lam)
        bracket = _start_bracket(spec, traj, matrices) / lam
        wg = w[:, None] * bracket
        n += c
        s_w += w.sum()
        s_w2 += (w * w).sum()
        s_g += wg.sum(axis=0)
        s_g2 += (wg * wg).sum(axis=0)
        s_wg += (w[:, None] * wg).sum(axis=0)

    mean_w = s_w / n
    mean_g = s_g / n
    var_g = np.maximum(s_g2 / n - mean_g ** 2, 0.0)
    var_w = max(s_w2 / n - mean_w ** 2, 0.0)
    cov = (s_wg / n - mean_g * mean_w) / n
    return PathwiseEstimate(estimate=mean_g, se=np.sqrt(var_g / n),
                            mean_weight=float(mean_w),
                            weight_se=float(np.sqrt(var_w / n)),
                            cov_grad_weight=cov)


def _start_bracket(spec, traj: TrajectoryBatch, matrices) -> np.ndarray:
    """The k=0 bracket of the matching field without the sigma^T factor."""
    m, steps, d = traj.increments.shape
    r, y, grad_g = _field_ingredients(spec, traj)
    if matrices.is_identity:
        return r.sum(axis=1) - grad_g
    t0 = traj.times[0]
    pairs = np.stack([np.full(steps + 1, t0),
                      np.concatenate([traj.times[:steps], traj.times[-1:]])], axis=1)
    m_all, dm_all = matrices.eval_pairs_values(pairs)
    contrib = (np.einsum("kab,mkb->ma", m_all[:steps], r)
               - np.einsum("kab,mkb->ma", dm_all[:steps], y))
    return contrib - grad_g @ m_all[steps].T


@dataclass
class AdjointEstimate:
    estimate: np.ndarray
    se: np.ndarray
    mean_weight: float
    weight_se: float


def adjoint_grad_estimator(spec, x: np.ndarray, t: float, m: int,
                           rng: np.random.Generator, steps: int = 100,
                           chunk: int = 16384) -> AdjointEstimate:
    """Same gradient as pathwise_grad_estimator, via the lean adjoint:
    grad_x E[exp(-W/lam)] = -lam^-1 E[a_0 exp(-W/lam)]."""
    x = np.asarray(x, dtype=float)
    lam = spec.noise_level
    d = spec.dim
    dt = (spec.horizon - t) / steps
    zero = _ZeroPolicy()
    n = 0
    s_w = 0.0
    s_w2 = 0.0
    s_g = np.zeros(d)
    s_g2 = np.zeros(d)
    done = 0
    while done < m:
        c = min(chunk, m - done)
        done += c
        inc = rng.standard_normal((c, steps, d)) * np.sqrt(dt)
        traj = rollout(spec, zero, inc, detach=True,
                       x0=np.broadcast_to(x, (c, d)).copy(), t0=t)
        w = np.exp(-work_functional(spec, traj, 0) / lam)
        a0 = adjoint_ode_solve(spec, traj)[:, 0]
        g = -(w[:, None] * a0) / lam
        n += c
        s_w += w.sum()
        s_w2 += (w * w).sum()
        s_g += g.sum(axis=0)
        s_g2 += (g * g).sum(axis=0)
    mean_w = s_w / n
    mean_g = s_g / n
    var_g = np.maximum(s_g2 / n - mean_g ** 2, 0.0)
    var_w = max(s_w2 / n - mean_w ** 2, 0.0)
    return AdjointEstimate(estimate=mean_g, se=np.sqrt(var_g / n),
                           mean_weight=float(mean_w),
                           weight_se=float(np.sqrt(var_w / n)))
