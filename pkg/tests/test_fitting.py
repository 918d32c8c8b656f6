import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from optocal.fitting import (FitProblem, IllConditionedError, LogNormal, Normal, SolverOptions,
                             Status, db_normal, monte_carlo_propagate, numeric_jacobian,
                             relative_normal, solve)


def linear_problem(seed, m=40, n=3, noise=0.01):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(m, n)) * np.logspace(0, 3, n)
    x_true = rng.normal(size=n)
    y = A @ x_true + noise * rng.normal(size=m)
    return A, y


class TestLinear:
    @given(st.integers(0, 10_000))
    def test_normal_equation_accuracy(self, seed):
        A, y = linear_problem(seed)
        res = solve(FitProblem(lambda x: A @ x - y, np.zeros(3), jacobian=lambda x: A))
        ref = np.linalg.lstsq(A, y, rcond=None)[0]
        assert np.max(np.abs(res.x - ref)) <= 1e-10 * max(1.0, np.max(np.abs(ref)))

    def test_covariance_matches_textbook(self):
        A, y = linear_problem(1)
        res = solve(FitProblem(lambda x: A @ x - y, np.zeros(3), jacobian=lambda x: A))
        s2 = (res.residuals @ res.residuals) / (A.shape[0] - 3)
        ref = s2 * np.linalg.inv(A.T @ A)
        assert np.allclose(res.covariance, ref, rtol=1e-6)

    def test_absolute_sigma(self):
        A, y = linear_problem(2)
        res = solve(FitProblem(lambda x: A @ x - y, np.zeros(3), jacobian=lambda x: A),
                    SolverOptions(absolute_sigma=True))
        assert np.allclose(res.covariance, np.linalg.inv(A.T @ A), rtol=1e-6)

    def test_weights(self):
        A, y = linear_problem(3)
        w = np.linspace(1, 4, A.shape[0])
        res = solve(FitProblem(lambda x: A @ x - y, np.zeros(3), weights=w))
        sw = np.sqrt(w)
        ref = np.linalg.lstsq(A * sw[:, None], y * sw, rcond=None)[0]
        assert np.allclose(res.x, ref, rtol=1e-7)


class TestNonlinear:
    def test_exponential_decay(self):
        t = np.linspace(0, 5, 60)
        y = 3.0 * np.exp(-1.3 * t) + 0.2
        res = solve(FitProblem(lambda p: p[0] * np.exp(-p[1] * t) + p[2] - y, [1.0, 0.5, 0.0]))
        assert res.converged
        assert np.allclose(res.x, [3.0, 1.3, 0.2], rtol=1e-7)

    def test_rosenbrock(self):
        res = solve(FitProblem(lambda p: np.array([10 * (p[1] - p[0] ** 2), 1 - p[0]]), [-1.2, 1.0]))
        assert np.allclose(res.x, [1.0, 1.0], atol=1e-8)

    def test_bounds_respected(self):
        t = np.linspace(0, 1, 20)
        y = 2.0 * t
        res = solve(FitProblem(lambda p: p[0] * t - y, [0.5], lower=[0.0], upper=[1.0]))
        assert res.x[0] == pytest.approx(1.0)
        assert res.at_bound[0]

    def test_degenerate_parameters_named(self):
        t = np.linspace(0, 1, 20)
        with pytest.raises(IllConditionedError) as exc:
            solve(FitProblem(lambda p: (p[0] + p[1]) * t - t, [0.3, 0.3], names=["a", "b"]))
        assert set(exc.value.unconstrained) <= {"a", "b"} and exc.value.unconstrained

    def test_max_iter_status(self):
        t = np.linspace(0, 5, 60)
        y = 3.0 * np.exp(-1.3 * t)
        res = solve(FitProblem(lambda p: p[0] * np.exp(-p[1] * t) - y, [1.0, 0.5]),
                    SolverOptions(max_iter=1))
        assert res.status is Status.MAX_ITER and not res.converged

    def test_named_access(self):
        t = np.linspace(0, 1, 10)
        res = solve(FitProblem(lambda p: p[0] * t + p[1] - (2 * t + 1), [0, 0], names=["m", "c"]))
        assert res["m"] == pytest.approx(2.0)
        assert res.sigma("c") >= 0
        assert set(res.as_dict()) >= {"m", "c"}


class TestJacobian:
    def test_matches_analytic(self):
        t = np.linspace(0, 3, 30)

        def f(p):
            return p[0] * np.sin(p[1] * t)

        p = np.array([1.7, 0.9])
        ana = np.column_stack([np.sin(p[1] * t), p[0] * t * np.cos(p[1] * t)])
        assert np.allclose(numeric_jacobian(f, p), ana, rtol=1e-5, atol=1e-7)

    def test_one_sided_at_bound(self):
        p = np.array([0.0])
        J = numeric_jacobian(lambda q: np.array([q[0] ** 2 + q[0]]), p, lower=np.array([0.0]),
                             upper=np.array([1.0]))
        assert J[0, 0] == pytest.approx(1.0, rel=1e-4)


class TestMonteCarlo:
    def test_reproducible(self):
        inputs = {"a": Normal(1.0, 0.1), "b": LogNormal(0.0, 0.1)}
        a = monte_carlo_propagate(lambda a, b: a * b, inputs, 1000, 7, vectorized=True)
        b = monte_carlo_propagate(lambda a, b: a * b, inputs, 1000, 7, vectorized=True)
        assert np.array_equal(a.samples, b.samples)

    def test_scalar_and_vectorized_agree(self):
        inputs = {"a": Normal(2.0, 0.1)}
        a = monte_carlo_propagate(lambda a: a ** 2, inputs, 500, 3, vectorized=True)
        b = monte_carlo_propagate(lambda a: a ** 2, inputs, 500, 3, vectorized=False)
        assert np.allclose(a.samples, b.samples)

    def test_linear_propagation(self):
        s = monte_carlo_propagate(lambda a: 3 * a, {"a": relative_normal(1.0, 0.05)}, 20000, 1,
                                  vectorized=True)
        assert s.relative_half_width_95 == pytest.approx(0.05, rel=0.05)

    def test_db_normal(self):
        s = monte_carlo_propagate(lambda g: g, {"g": db_normal(0.0, 1.0)}, 20000, 2, vectorized=True)
        assert s.half_width_95 == pytest.approx(1.0, rel=0.05)

    def test_failures_counted(self):
        def f(a):
            if a < 0:
                raise ValueError("negative")
            return a

        s = monte_carlo_propagate(f, {"a": Normal(0.0, 1.0)}, 400, 5)
        assert 0.3 < s.failure_rate < 0.7

    def test_minimum_samples(self):
        with pytest.raises(ValueError):
            monte_carlo_propagate(lambda a: a, {"a": Normal(0, 1)}, 10, 0)

    @given(st.floats(0.01, 0.2), st.floats(0.01, 0.2))
    def test_wider_input_wider_output(self, a, b):
        lo, hi = sorted((a, b))
        if hi - lo < 0.005:
            return
        f = lambda x: x ** 2  # noqa: E731
        s_lo = monte_carlo_propagate(f, {"x": relative_normal(1.0, lo)}, 2000, 9, vectorized=True)
        s_hi = monte_carlo_propagate(f, {"x": relative_normal(1.0, hi)}, 2000, 9, vectorized=True)
        assert s_hi.half_width_95 > s_lo.half_width_95
