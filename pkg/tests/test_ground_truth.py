"""Reference solutions: Riccati, matrix exponential, OU closed form, PDE grid."""

import dataclasses

import numpy as np
import pytest
import scipy.linalg

from soclab.errors import (
    ConfigError,
    ContractError,
    DegenerateOracleError,
    HorizonError,
)
from soclab.ground_truth import (
    DoubleWellSolution,
    LinearOuGroundTruth,
    LqrGroundTruth,
    double_well_solve_1d,
    linear_ou_optimal_control,
    linear_ou_value_table,
    load_ground_truth_cache,
    lqr_optimal_control,
    lqr_value,
    make_ground_truth,
    matrix_exponential,
    riccati_solve,
    save_ground_truth_cache,
    value_mc_oracle,
)
from soclab.problem import make_setting
from soclab.rng import RngStreams

from conftest import build_point_lqr


def _scalar_riccati_closed_form(a, p, q, s, tau):
    """F(tau) for dF/dtau = 2aF - 2 s^2 F^2 + p, F(0) = q (tau = T - t)."""
    r = np.sqrt(a * a + 2.0 * s * s * p)
    f_plus = (a + r) / (2.0 * s * s)
    f_minus = (a - r) / (2.0 * s * s)
    g0 = (q - f_plus) / (q - f_minus)
    g = g0 * np.exp(-2.0 * r * tau)
    return (f_plus - f_minus * g) / (1.0 - g)


class TestRiccati:
    def test_scalar_matches_closed_form(self):
        a, p, q, s, T = 0.7, 0.9, 0.4, 1.3, 2.0
        ric = riccati_solve(np.array([[a]]), np.array([[p]]), np.array([[q]]),
                            np.array([[s]]), horizon=T, steps=5000)
        for t in (0.0, 0.31, 1.0, 1.77, T):
            want = _scalar_riccati_closed_form(a, p, q, s, T - t)
            got = float(ric.interp_F(t)[0, 0])
            assert abs(got - want) < 1e-8, (t, got, want)

    def test_scalar_offset_matches_closed_form(self):
        a, p, q, s, T = 0.7, 0.9, 0.4, 1.3, 2.0
        ric = riccati_solve(np.array([[a]]), np.array([[p]]), np.array([[q]]),
                            np.array([[s]]), horizon=T, steps=5000)
        r = np.sqrt(a * a + 2.0 * s * s * p)
        f_plus = (a + r) / (2.0 * s * s)
        f_minus = (a - r) / (2.0 * s * s)
        g0 = (q - f_plus) / (q - f_minus)
        for t in (0.0, 0.5, 1.5):
            tau = T - t
            g = g0 * np.exp(-2.0 * r * tau)
            want = s * s * f_plus * tau + 0.5 * np.log((1.0 - g) / (1.0 - g0))
            assert abs(ric.interp_c(t) - want) < 1e-8

    def test_terminal_condition_exact(self, point_lqr):
        co = point_lqr.coefficients
        ric = riccati_solve(co["A"], co["P"], co["Q"], co["sigma0"],
                            point_lqr.horizon, steps=200)
        assert np.array_equal(ric.F[-1], co["Q"])
        assert ric.c_unit[-1] == 0.0

    def test_fourth_order_convergence(self, point_lqr):
        co = point_lqr.coefficients
        args = (co["A"], co["P"], co["Q"], co["sigma0"], point_lqr.horizon)
        ref = riccati_solve(*args, steps=12800).F[0]
        e1 = np.abs(riccati_solve(*args, steps=100).F[0] - ref).max()
        e2 = np.abs(riccati_solve(*args, steps=200).F[0] - ref).max()
        order = np.log2(e1 / e2)
        assert 3.5 < order < 4.5, (e1, e2, order)

    def test_interpolated_table_satisfies_ode(self, point_lqr):
        co = point_lqr.coefficients
        ric = riccati_solve(co["A"], co["P"], co["Q"], co["sigma0"],
                            point_lqr.horizon, steps=10_000)
        S = co["sigma0"] @ co["sigma0"].T
        idx = np.linspace(1, len(ric.times) - 2, 7, dtype=int)
        dt = ric.times[1] - ric.times[0]
        for i in idx:
            F = ric.F[i]
            dF_dt = (ric.F[i + 1] - ric.F[i - 1]) / (2.0 * dt)  # forward time
            residual = dF_dt + co["A"].T @ F + F @ co["A"] - 2.0 * F @ S @ F + co["P"]
            assert np.abs(residual).max() < 1e-6

    def test_blowup_raises_horizon_error(self):
        # negative running weight: finite-time escape of the backward flow
        with pytest.raises(HorizonError):
            riccati_solve(np.array([[0.0]]), np.array([[-100.0]]),
                          np.array([[0.0]]), np.array([[1.0]]), horizon=1.0,
                          steps=1000)

    def test_contract_violations(self, point_lqr):
        co = point_lqr.coefficients
        with pytest.raises(ContractError):
            riccati_solve(co["A"], co["P"], co["Q"], co["sigma0"], 1.0, steps=50)
        with pytest.raises(ContractError):
            riccati_solve(co["A"], co["P"], np.array([[0.0, 1.0], [0.0, 0.0]]),
                          co["sigma0"], 1.0)
        with pytest.raises(ContractError):
            riccati_solve(co["A"], co["P"], -np.eye(2), co["sigma0"], 1.0)

    def test_control_is_gradient_of_value(self, point_lqr):
        spec = point_lqr
        co = spec.coefficients
        ric = riccati_solve(co["A"], co["P"], co["Q"], co["sigma0"], spec.horizon)
        x = np.random.default_rng(0).standard_normal((5, 2))
        t = 0.4
        h = 1e-6
        grad = np.empty_like(x)
        for j in range(2):
            dx = np.zeros(2)
            dx[j] = h
            grad[:, j] = (lqr_value(ric, x + dx, t, spec.noise_level)
                          - lqr_value(ric, x - dx, t, spec.noise_level)) / (2 * h)
        u = lqr_optimal_control(ric, co["sigma0"], x, t)
        np.testing.assert_allclose(u, -grad @ co["sigma0"], rtol=1e-5, atol=1e-7)


class TestMatrixExponential:
    def test_matches_scipy(self):
        rng = np.random.default_rng(1)
        for scale in (0.1, 1.0, 8.0):
            A = scale * rng.standard_normal((5, 5))
            np.testing.assert_allclose(matrix_exponential(A),
                                       scipy.linalg.expm(A), rtol=1e-11,
                                       atol=1e-11)

    def test_nilpotent_exact(self):
        A = np.array([[0.0, 1.0], [0.0, 0.0]])
        np.testing.assert_allclose(matrix_exponential(A),
                                   np.array([[1.0, 1.0], [0.0, 1.0]]),
                                   rtol=0, atol=1e-15)

    def test_rejects_bad_input(self):
        with pytest.raises(ContractError):
            matrix_exponential(np.ones((2, 3)))
        with pytest.raises(ContractError):
            matrix_exponential(np.eye(65))


class TestLinearOu:
    def test_value_table_matches_diagonal_closed_form(self):
        a, T, d = 0.7, 1.0, 3
        A = a * np.eye(d)
        sigma0 = np.eye(d)
        gamma = np.array([0.5, -1.0, 2.0])
        value = linear_ou_value_table(A, sigma0, gamma, T, noise_level=1.0)
        x = np.random.default_rng(2).standard_normal((4, d))
        for t in (0.0, 0.4, 1.0):
            sig = (np.exp(2 * a * (T - t)) - 1.0) / (2 * a)
            want = np.exp(a * (T - t)) * (x @ gamma) - 0.5 * sig * (gamma @ gamma)
            np.testing.assert_allclose(value(x, t), want, rtol=1e-6, atol=2e-6)

    def test_control_is_negative_sigma_grad_value(self):
        spec, _ = make_setting("linear_ou", seed=3, dim=3)
        co = spec.coefficients
        value = linear_ou_value_table(co["A"], co["sigma0"], co["gamma"],
                                      spec.horizon, spec.noise_level)
        x = np.random.default_rng(3).standard_normal((4, 3))
        t, h = 0.3, 1e-6
        grad = np.empty_like(x)
        for j in range(3):
            dx = np.zeros(3)
            dx[j] = h
            grad[:, j] = (value(x + dx, t) - value(x - dx, t)) / (2 * h)
        u = linear_ou_optimal_control(co["A"], co["sigma0"], co["gamma"],
                                      spec.horizon, x, t)
        np.testing.assert_allclose(u, -grad @ co["sigma0"], rtol=1e-5, atol=1e-7)

    def test_terminal_value_is_terminal_cost(self):
        spec, _ = make_setting("linear_ou", seed=0, dim=2)
        gt = make_ground_truth(spec)
        x = np.random.default_rng(4).standard_normal((6, 2))
        np.testing.assert_allclose(gt.value(x, spec.horizon),
                                   spec.terminal_cost(x), rtol=1e-10, atol=1e-10)


class TestDoubleWell:
    @pytest.fixture(scope="class")
    @staticmethod
    def grid():
        return double_well_solve_1d(1.0, 1.0, noise_level=1.0, horizon=1.0,
                                    n_x=801, n_t=801)

    def test_terminal_value_exact_on_nodes(self, grid):
        g = 1.0 * (grid.xs ** 2 - 1.0) ** 2
        np.testing.assert_allclose(grid.value[-1], g, rtol=1e-12, atol=1e-12)

    def test_control_parity(self, grid):
        # even potential: u*(-x) = -u*(x) on the symmetric grid
        assert np.abs(grid.u_star + grid.u_star[:, ::-1]).max() < 1e-8

    def test_lookup_clips_to_walls(self, grid):
        far = grid.control(np.array([50.0]), 0.2)
        wall = grid.control(np.array([grid.xs[-1]]), 0.2)
        assert np.array_equal(far, wall)
        assert abs(wall[0]) < 1e-12  # Neumann wall: control vanishes

    def test_value_decreases_backward_from_terminal_at_origin(self, grid):
        # running cost is zero, so V(x, t) <= ... the PDE only smooths:
        # at the saddle x=0 the value strictly drops as horizon recedes
        v0 = grid.value_at(np.array([0.0]), 0.0)
        vT = grid.value_at(np.array([0.0]), 1.0)
        assert v0[0] < vT[0]

    def test_contract_violations(self):
        with pytest.raises(ContractError):
            double_well_solve_1d(1.0, 1.0, 1.0, 1.0, half_width=2.0)
        with pytest.raises(ContractError):
            double_well_solve_1d(1.0, 1.0, 1.0, 1.0, n_x=100)

    def test_vector_solution_shares_tables(self):
        sol = DoubleWellSolution(np.array([5.0, 1.0, 1.0]),
                                 np.array([3.0, 1.0, 1.0]), 1.0, 1.0,
                                 n_x=801, n_t=801)
        assert len(sol.tables) == 2  # distinct (kappa, nu) pairs only
        x = np.random.default_rng(5).standard_normal((4, 3))
        u = sol.control(x, 0.3)
        assert u.shape == (4, 3)
        # coordinates 1 and 2 share a table: same input -> same output
        x_same = x.copy()
        x_same[:, 2] = x_same[:, 1]
        u_same = sol.control(x_same, 0.3)
        np.testing.assert_array_equal(u_same[:, 1], u_same[:, 2])


class TestMcOracle:
    def test_matches_lqr_value_and_control(self):
        spec = build_point_lqr(dim=2, seed=1)
        gt = make_ground_truth(spec)
        x = np.array([0.4, -0.3])
        est = value_mc_oracle(spec, x, 0.0, m=40_000,
                              rng=RngStreams(11).generator("oracle"), steps=100)
        v_true = float(gt.value(x[None, :], 0.0)[0])
        u_true = gt.control(x[None, :], 0.0)[0]
        assert abs(est.value - v_true) < 4.0 * est.value_se + 2e-3
        assert np.all(np.abs(est.control - u_true) < 4.0 * est.control_se + 5e-3)

    def test_all_zero_weights_raise(self):
        spec = dataclasses.replace(
            build_point_lqr(noise_level=1e-3),
            terminal_cost=lambda x: 1e6 * np.ones(np.asarray(x).shape[0]))
        with pytest.raises(DegenerateOracleError):
            value_mc_oracle(spec, np.zeros(2), 0.0, m=64,
                            rng=RngStreams(0).generator("o"), steps=20)


class TestDispatchAndCache:
    def test_dispatch(self):
        lqr_spec, _ = make_setting("quadratic_ou_easy", dim=2)
        assert isinstance(make_ground_truth(lqr_spec), LqrGroundTruth)
        ou_spec, _ = make_setting("linear_ou", dim=2)
        assert isinstance(make_ground_truth(ou_spec), LinearOuGroundTruth)
        pis_spec, _ = make_setting("pis_mixture_d2")
        with pytest.raises(ConfigError):
            make_ground_truth(pis_spec)

    def test_lqr_cache_roundtrip(self, tmp_path, point_lqr):
        gt = make_ground_truth(point_lqr, riccati_steps=500)
        path = tmp_path / "gt.npz"
        save_ground_truth_cache(path, point_lqr, gt)
        loaded = load_ground_truth_cache(path, point_lqr)
        x = np.random.default_rng(6).standard_normal((3, 2))
        assert np.array_equal(loaded.control(x, 0.3), gt.control(x, 0.3))
        assert np.array_equal(loaded.value(x, 0.3), gt.value(x, 0.3))

    def test_cache_rejects_wrong_setting(self, tmp_path, point_lqr):
        gt = make_ground_truth(point_lqr, riccati_steps=500)
        path = tmp_path / "gt.npz"
        save_ground_truth_cache(path, point_lqr, gt)
        other, _ = make_setting("quadratic_ou_easy", dim=2)
        with pytest.raises(ConfigError):
            load_ground_truth_cache(path, other)

    def test_double_well_cache_roundtrip(self, tmp_path):
        spec, _ = make_setting("double_well", dim=2)
        gt = make_ground_truth(spec, n_x=801, n_t=801)
        path = tmp_path / "dw.npz"
        save_ground_truth_cache(path, spec, gt)
        loaded = load_ground_truth_cache(path, spec)
        x = np.random.default_rng(7).standard_normal((4, 2))
        assert np.array_equal(loaded.control(x, 0.5), gt.control(x, 0.5))
        assert np.array_equal(loaded.value(x, 0.5), gt.value(x, 0.5))
