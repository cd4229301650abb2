"""Shared builders for the test suite."""

import numpy as np
import pytest

from soclab.problem import InitialLaw, make_linear_quadratic


def build_point_lqr(dim: int = 2, seed: int = 0, horizon: float = 1.0,
                    noise_level: float = 1.0, x_init: float = 0.5):
    """Small linear-quadratic problem with a point initial law.

    Random stable drift matrix, SPD running and terminal cost matrices; the
    closed-form solution exists for any of these, so tests can compare
    against the backward matrix-ODE solution.
    """
    rng = np.random.default_rng(seed)
    A = 0.3 * rng.standard_normal((dim, dim)) - 0.5 * np.eye(dim)
    P_half = 0.3 * rng.standard_normal((dim, dim))
    P = P_half @ P_half.T + 0.2 * np.eye(dim)
    Q_half = 0.3 * rng.standard_normal((dim, dim))
    Q = Q_half @ Q_half.T + 0.3 * np.eye(dim)
    law = InitialLaw("point", point=np.full(dim, x_init))
    return make_linear_quadratic(A, P, Q, noise_level=noise_level,
                                 horizon=horizon, initial_law=law,
                                 name="test_lqr")


@pytest.fixture
def point_lqr():
    return build_point_lqr()
