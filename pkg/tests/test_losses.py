"""Losses, matching fields, and the standalone gradient estimators."""

import dataclasses

import numpy as np
import pytest

from soclab import autodiff as ad
from soclab.autodiff import Tape
from soclab.errors import ContractError, DegenerateWeightsError
from soclab.ground_truth import make_ground_truth
from soclab.losses import (
    _pair_grid,
    _segment_selector,
    _tilde_y_traced,
    adjoint_grad_estimator,
    adjoint_matching_field,
    adjoint_ode_solve,
    loss_adjoint,
    loss_cross_entropy,
    loss_log_variance,
    loss_moment,
    loss_socm,
    loss_socm_with_field,
    loss_variance,
    matching_field,
    optimal_moment_shift,
    pathwise_grad_estimator,
    tilde_Y,
)
from soclab.nets import ClosedFormPolicy, GatedMatrices, IdentityMatrices, NeuralPolicy
from soclab.rng import RngStreams
from soclab.sim import ImportanceWeights, importance_weight, rollout, sample_increments
from soclab.problem import make_setting

from conftest import build_point_lqr


def _traj(spec, policy, m=6, steps=5, seed=0):
    streams = RngStreams(seed)
    inc = sample_increments(m, steps, spec.dim, spec.horizon,
                            streams.generator("inc"))
    return rollout(spec, policy, inc, rng=streams.generator("init"))


def _noisy_neural(dim, seed=0, scale=0.15):
    pol = NeuralPolicy(dim, width=8, hidden=2, rng=RngStreams(seed).generator("p"))
    noise = np.random.default_rng(seed + 100)
    for k in pol.params:
        pol.params[k] = pol.params[k] + scale * noise.standard_normal(
            pol.params[k].shape)
    return pol


def _perturbed_gated(dim, seed=0, scale=0.2):
    mats = GatedMatrices(dim, width=8, hidden=2,
                         rng=RngStreams(seed).generator("m"))
    noise = np.random.default_rng(seed + 200)
    for k in mats.params:
        if k.startswith("net."):
            mats.params[k] = mats.params[k] + scale * noise.standard_normal(
                mats.params[k].shape)
    return mats


def test_pair_grid_enumerates_upper_triangle():
    times = np.array([0.0, 0.25, 0.5, 0.75])
    kk, jj, ts_pairs, term_pairs = _pair_grid(times, 3)
    np.testing.assert_array_equal(kk, [0, 0, 0, 1, 1, 2])
    np.testing.assert_array_equal(jj, [0, 1, 2, 1, 2, 2])
    np.testing.assert_array_equal(ts_pairs[:, 0], times[kk])
    np.testing.assert_array_equal(ts_pairs[:, 1], times[jj])
    np.testing.assert_array_equal(term_pairs,
                                  [[0.0, 0.75], [0.25, 0.75], [0.5, 0.75]])
    sel = _segment_selector(kk, 3)
    v = np.arange(6.0).reshape(6, 1)
    np.testing.assert_array_equal((sel @ v).ravel(), [0 + 1 + 2, 3 + 4, 5])


class TestMatchingField:
    def test_identity_field_matches_direct_sums(self, point_lqr):
        spec = point_lqr
        pol = _noisy_neural(spec.dim)
        traj = _traj(spec, pol)
        w = matching_field(spec, traj, IdentityMatrices(spec.dim))
        m, steps, d = traj.increments.shape
        lam = spec.noise_level
        dt = traj.dt
        want = np.empty_like(w)
        for k in range(steps):
            bracket = np.zeros((m, d))
            for j in range(k, steps):
                t_j = traj.times[j]
                x_j = traj.states[:, j]
                z = (traj.control_values[:, j] * dt
                     + np.sqrt(lam) * traj.increments[:, j])
                y_j = z @ spec.diffusion_inv(t_j)
                jac = spec.drift_jacobian(x_j, t_j)
                bracket += (np.einsum("mij,mj->mi", jac, y_j)
                            - dt * spec.state_cost_grad(x_j, t_j))
            bracket -= spec.terminal_cost_grad(traj.states[:, steps])
            want[:, k] = bracket @ spec.diffusion(traj.times[k])
        np.testing.assert_allclose(w, want, rtol=1e-12, atol=1e-12)

    def test_gated_at_init_matches_identity(self, point_lqr):
        spec = point_lqr
        traj = _traj(spec, _noisy_neural(spec.dim))
        w_id = matching_field(spec, traj, IdentityMatrices(spec.dim))
        gated = GatedMatrices(spec.dim, width=8, hidden=2,
                              rng=RngStreams(1).generator("m"))
        w_gated = matching_field(spec, traj, gated)
        np.testing.assert_allclose(w_gated, w_id, rtol=1e-12, atol=1e-12)

    def test_taped_field_matches_untaped_values(self, point_lqr):
        spec = point_lqr
        traj = _traj(spec, _noisy_neural(spec.dim))
        mats = _perturbed_gated(spec.dim)
        w_plain = matching_field(spec, traj, mats)
        tape = Tape()
        w_var = matching_field(spec, traj, mats, tape=tape,
                               pvars=mats.param_vars(tape))
        np.testing.assert_allclose(w_var.value, w_plain, rtol=1e-12, atol=1e-14)

    def test_field_gradient_wrt_matrix_params(self, point_lqr):
        spec = point_lqr
        traj = _traj(spec, _noisy_neural(spec.dim), m=3, steps=4)
        mats = _perturbed_gated(spec.dim)

        def fn(tape, pv):
            w = matching_field(spec, traj, mats, tape=tape, pvars=pv)
            return ad.vsum(ad.square(w))

        assert ad.grad_check(fn, mats.params, step=1e-6) < 1e-5

    def test_rejects_traced_trajectory(self, point_lqr):
        spec = point_lqr
        pol = _noisy_neural(spec.dim)
        streams = RngStreams(0)
        inc = sample_increments(2, 3, spec.dim, spec.horizon,
                                streams.generator("inc"))
        tape = Tape()
        traj = rollout(spec, pol, inc, detach=False,
                       rng=streams.generator("init"), tape=tape,
                       pvars=pol.param_vars(tape))
        with pytest.raises(ContractError):
            matching_field(spec, traj, IdentityMatrices(spec.dim))


class TestSocmLoss:
    def test_value_recomputed_by_hand(self, point_lqr):
        spec = point_lqr
        c = np.array([0.3, -0.7])
        pol = ClosedFormPolicy(lambda x, t: np.broadcast_to(c, x.shape).copy())
        traj = _traj(spec, pol)
        w = matching_field(spec, traj, IdentityMatrices(spec.dim))
        alpha = importance_weight(spec, traj)
        out = loss_socm(spec, pol, IdentityMatrices(spec.dim), traj)
        diff = c[None, None, :] - w
        want = np.mean(alpha.values * traj.dt / spec.horizon
                       * np.einsum("mkd->m", diff * diff))
        assert abs(out.value - want) < 1e-12 * max(1.0, abs(want))
        assert out.grads["matrices"] == {}

    def test_identity_path_equals_with_field(self, point_lqr):
        spec = point_lqr
        pol = _noisy_neural(spec.dim)
        traj = _traj(spec, pol)
        fld = matching_field(spec, traj, IdentityMatrices(spec.dim))
        a = loss_socm(spec, pol, IdentityMatrices(spec.dim), traj)
        b = loss_socm_with_field(spec, pol, fld, traj)
        assert a.value == b.value
        for k in a.grads["control"]:
            assert np.array_equal(a.grads["control"][k], b.grads["control"][k])

    def test_gated_grads_cover_both_groups(self, point_lqr):
        spec = point_lqr
        pol = _noisy_neural(spec.dim)
        mats = _perturbed_gated(spec.dim)
        traj = _traj(spec, pol, m=4, steps=4)
        out = loss_socm(spec, pol, mats, traj)
        assert set(out.grads) == {"control", "matrices"}
        assert set(out.grads["control"]) == set(pol.params)
        assert set(out.grads["matrices"]) == set(mats.params)
        assert any(np.abs(g).max() > 0 for g in out.grads["matrices"].values())

    def test_control_gradient_matches_fd(self, point_lqr):
        spec = point_lqr
        pol = _noisy_neural(spec.dim)
        mats = _perturbed_gated(spec.dim)
        traj = _traj(spec, pol, m=4, steps=4)
        base = loss_socm(spec, pol, mats, traj)
        h = 1e-6
        for key, idx in (("w2", (0, 0)), ("b0", (3,)), ("w0", (1, 2)),
                         ("b2", (1,))):
            old = pol.params[key][idx]
            pol.params[key][idx] = old + h
            vp = loss_socm(spec, pol, mats, traj).value
            pol.params[key][idx] = old - h
            vm = loss_socm(spec, pol, mats, traj).value
            pol.params[key][idx] = old
            fd = (vp - vm) / (2 * h)
            got = base.grads["control"][key][idx]
            assert abs(got - fd) < 1e-4 * max(1.0, abs(fd)), (key, idx, got, fd)

    def test_matrix_gradient_matches_fd(self, point_lqr):
        spec = point_lqr
        pol = _noisy_neural(spec.dim)
        mats = _perturbed_gated(spec.dim)
        traj = _traj(spec, pol, m=4, steps=4)
        base = loss_socm(spec, pol, mats, traj)
        h = 1e-6
        for key, idx in (("gamma_raw", (0,)), ("net.w2", (0, 1)),
                         ("net.b0", (2,))):
            old = mats.params[key][idx]
            mats.params[key][idx] = old + h
            vp = loss_socm(spec, pol, mats, traj).value
            mats.params[key][idx] = old - h
            vm = loss_socm(spec, pol, mats, traj).value
            mats.params[key][idx] = old
            fd = (vp - vm) / (2 * h)
            got = base.grads["matrices"][key][idx]
            assert abs(got - fd) < 1e-4 * max(1.0, abs(fd)), (key, idx, got, fd)

    def test_all_saturated_raises(self):
        spec = dataclasses.replace(
            build_point_lqr(noise_level=1e-4),
            terminal_cost=lambda x: -1e6 * np.ones(np.asarray(x).shape[0]),
            terminal_cost_grad=lambda x: np.zeros_like(np.asarray(x)))
        pol = ClosedFormPolicy(lambda x, t: np.zeros_like(x))
        traj = _traj(spec, pol, m=4, steps=3)
        with pytest.raises(DegenerateWeightsError):
            loss_socm(spec, pol, IdentityMatrices(spec.dim), traj)

    def test_saturation_count_propagates(self, point_lqr):
        spec = point_lqr
        pol = _noisy_neural(spec.dim)
        traj = _traj(spec, pol, m=5, steps=4)
        real = importance_weight(spec, traj)
        doctored = ImportanceWeights(values=real.values,
                                     log_values=real.log_values, n_saturated=2)
        out = loss_socm(spec, pol, IdentityMatrices(spec.dim), traj,
                        weights=doctored)
        assert out.n_saturated == 2


class TestTildeY:
    def test_numpy_matches_direct_formula(self, point_lqr):
        spec = point_lqr
        sampler = _noisy_neural(spec.dim, seed=1)
        evaluator = _noisy_neural(spec.dim, seed=2)
        traj = _traj(spec, sampler)
        y = tilde_Y(spec, evaluator, traj)
        lam = spec.noise_level
        dt = traj.dt
        m, steps, d = traj.increments.shape
        u = np.stack([evaluator.eval_batch(traj.states[:, k], traj.times[k])
                      for k in range(steps)], axis=1)
        f_int = dt * sum(spec.state_cost(traj.states[:, k], traj.times[k])
                         for k in range(steps))
        want = (-dt / lam * np.einsum("mkd,mkd->m", u, traj.control_values)
                - f_int / lam
                - np.einsum("mkd,mkd->m", u, traj.increments) / np.sqrt(lam)
                + 0.5 * dt / lam * np.einsum("mkd,mkd->m", u, u))
        np.testing.assert_allclose(y, want, rtol=1e-12)

    def test_traced_twin_is_bitwise(self, point_lqr):
        spec = point_lqr
        pol = _noisy_neural(spec.dim, seed=3)
        traj = _traj(spec, pol)
        y_np = tilde_Y(spec, pol, traj)
        tape = Tape()
        y_var = _tilde_y_traced(spec, pol, traj, tape, pol.param_vars(tape))
        assert np.array_equal(y_var.value, y_np)


class TestVarianceFamily:
    def test_variance_matches_numpy_var(self, point_lqr):
        spec = point_lqr
        pol = _noisy_neural(spec.dim, seed=4)
        traj = _traj(spec, pol, m=16)
        lam = spec.noise_level
        z = tilde_Y(spec, pol, traj) - spec.terminal_cost(
            traj.states[:, traj.num_steps]) / lam
        out = loss_variance(spec, pol, traj)
        assert abs(out.value - np.var(np.exp(z), ddof=1)) < 1e-10
        out_log = loss_log_variance(spec, pol, traj)
        assert abs(out_log.value - np.var(z, ddof=1)) < 1e-12

    def test_needs_two_trajectories(self, point_lqr):
        spec = point_lqr
        pol = _noisy_neural(spec.dim)
        traj = _traj(spec, pol, m=1)
        with pytest.raises(ContractError):
            loss_variance(spec, pol, traj)

    def test_moment_at_optimal_shift_is_uncorrected_log_variance(self, point_lqr):
        spec = point_lqr
        pol = _noisy_neural(spec.dim, seed=5)
        traj = _traj(spec, pol, m=12)
        y0 = optimal_moment_shift(spec, pol, traj)
        mom = loss_moment(spec, pol, {"y0": np.array([y0])}, traj)
        logvar = loss_log_variance(spec, pol, traj, unbiased=False)
        assert abs(mom.value - logvar.value) < 1e-12 * max(1.0, abs(mom.value))
        # the shift gradient vanishes at its optimum
        assert abs(mom.grads["y0"]["y0"][0]) < 1e-12

    def test_gradients_match_fd(self, point_lqr):
        spec = point_lqr
        pol = _noisy_neural(spec.dim, seed=6)
        traj = _traj(spec, pol, m=6, steps=4)
        cases = {
            "cross_entropy": lambda: loss_cross_entropy(spec, pol, traj),
            "variance": lambda: loss_variance(spec, pol, traj),
            "log_variance": lambda: loss_log_variance(spec, pol, traj),
            "moment": lambda: loss_moment(spec, pol, {"y0": np.array([0.2])},
                                          traj),
        }
        h = 1e-6
        for name, fn in cases.items():
            base = fn()
            for key, idx in (("w2", (1, 0)), ("b1", (2,))):
                old = pol.params[key][idx]
                pol.params[key][idx] = old + h
                vp = fn().value
                pol.params[key][idx] = old - h
                vm = fn().value
                pol.params[key][idx] = old
                fd = (vp - vm) / (2 * h)
                got = base.grads["control"][key][idx]
                assert abs(got - fd) < 2e-4 * max(1.0, abs(fd)), (name, key, idx)


class TestAdjointLoss:
    def test_requires_traced_trajectory(self, point_lqr):
        spec = point_lqr
        pol = _noisy_neural(spec.dim)
        traj = _traj(spec, pol)
        with pytest.raises(ContractError):
            loss_adjoint(spec, pol, traj, {})

    def test_value_is_control_objective(self, point_lqr):
        spec = point_lqr
        pol = _noisy_neural(spec.dim, seed=7)
        streams = RngStreams(3)
        inc = sample_increments(8, 6, spec.dim, spec.horizon,
                                streams.generator("inc"))
        x0 = spec.initial_law.sample(8, spec.dim, streams.generator("init"))
        tape = Tape()
        pv = pol.param_vars(tape)
        traj = rollout(spec, pol, inc, detach=False, x0=x0, tape=tape, pvars=pv)
        out = loss_adjoint(spec, pol, traj, pv)
        from soclab.sim import work_functional
        dt = traj.dt
        u_sq = np.einsum("mkd,mkd->m", traj.control_values, traj.control_values)
        want = np.mean(0.5 * dt * u_sq + work_functional(spec, traj, 0))
        assert abs(out.value - want) < 1e-12 * max(1.0, abs(want))

    def test_gradient_matches_fd(self, point_lqr):
        spec = point_lqr
        pol = _noisy_neural(spec.dim, seed=8, scale=0.1)
        streams = RngStreams(4)
        inc = sample_increments(5, 4, spec.dim, spec.horizon,
                                streams.generator("inc"))
        x0 = spec.initial_law.sample(5, spec.dim, streams.generator("init"))

        def value():
            tape = Tape()
            pv = pol.param_vars(tape)
            traj = rollout(spec, pol, inc, detach=False, x0=x0, tape=tape,
                           pvars=pv)
            return loss_adjoint(spec, pol, traj, pv)

        base = value()
        h = 1e-6
        for key, idx in (("w2", (0, 1)), ("b0", (1,)), ("w1", (2, 3))):
            old = pol.params[key][idx]
            pol.params[key][idx] = old + h
            vp = value().value
            pol.params[key][idx] = old - h
            vm = value().value
            pol.params[key][idx] = old
            fd = (vp - vm) / (2 * h)
            got = base.grads["control"][key][idx]
            assert abs(got - fd) < 1e-4 * max(1.0, abs(fd)), (key, idx, got, fd)


class TestAdjointOde:
    def test_matches_hand_recurrence(self, point_lqr):
        spec = point_lqr
        pol = _noisy_neural(spec.dim, seed=9)
        traj = _traj(spec, pol, m=3, steps=4)
        a = adjoint_ode_solve(spec, traj)
        m, steps, d = traj.increments.shape
        want = np.empty_like(a)
        want[:, steps] = spec.terminal_cost_grad(traj.states[:, steps])
        for k in range(steps - 1, -1, -1):
            jac = spec.drift_jacobian(traj.states[:, k], traj.times[k])
            prod = np.stack([jac[i] @ want[i, k + 1] for i in range(m)])
            want[:, k] = want[:, k + 1] + traj.dt * (
                prod + spec.state_cost_grad(traj.states[:, k], traj.times[k]))
        np.testing.assert_allclose(a, want, rtol=1e-13)

    def test_field_is_minus_sigma_t_adjoint(self, point_lqr):
        spec = point_lqr
        pol = _noisy_neural(spec.dim, seed=10)
        traj = _traj(spec, pol, m=3, steps=4)
        fld = adjoint_matching_field(spec, traj)
        a = adjoint_ode_solve(spec, traj)
        for k in range(traj.num_steps):
            want = -a[:, k] @ spec.diffusion(traj.times[k])
            np.testing.assert_allclose(fld[:, k], want, rtol=1e-13)


class TestGradEstimators:
    def test_pathwise_and_adjoint_agree_with_analytic(self):
        spec = build_point_lqr(dim=2, seed=2)
        gt = make_ground_truth(spec)
        x = np.array([0.3, -0.2])
        lam = spec.noise_level
        v = float(gt.value(x[None, :], 0.0)[0])
        grad_v = 2.0 * gt.ric.interp_F(0.0) @ x
        analytic = -np.exp(-v / lam) / lam * grad_v

        pw = pathwise_grad_estimator(spec, x, 0.0, IdentityMatrices(2),
                                     m=20_000,
                                     rng=RngStreams(5).generator("pw"),
                                     steps=100)
        adj = adjoint_grad_estimator(spec, x, 0.0, m=20_000,
                                     rng=RngStreams(6).generator("adj"),
                                     steps=100)
        for est in (pw, adj):
            tol = 5.0 * est.se + 0.05 * np.abs(analytic)
            assert np.all(np.abs(est.estimate - analytic) < tol), (
                est.estimate, analytic, est.se)

    def test_gated_at_init_matches_identity_bracket(self):
        spec = build_point_lqr(dim=2, seed=3)
        x = np.array([0.1, 0.4])
        rng_a = RngStreams(7).generator("e")
        rng_b = RngStreams(7).generator("e")
        pw_id = pathwise_grad_estimator(spec, x, 0.0, IdentityMatrices(2),
                                        m=256, rng=rng_a, steps=20)
        gated = GatedMatrices(2, width=8, hidden=2,
                              rng=RngStreams(8).generator("m"))
        pw_gated = pathwise_grad_estimator(spec, x, 0.0, gated, m=256,
                                           rng=rng_b, steps=20)
        np.testing.assert_allclose(pw_gated.estimate, pw_id.estimate,
                                   rtol=1e-10, atol=1e-12)
        assert pw_gated.mean_weight == pw_id.mean_weight
