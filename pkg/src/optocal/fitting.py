"""Bounded Levenberg-Marquardt least squares and Monte-Carlo propagation.

All model fits in the package go through :func:`solve`. The solver works in
natural parameter units: bounds are enforced by projecting trial points onto
the box, and derivatives at an active bound switch to one-sided differences.
Internally steps are damped with a diagonal scaling taken from the Jacobian
column norms (MINPACK style), so parameters of wildly different magnitude
(an attenuation rate of 1e11 rad/s next to a critical temperature of 1 K)
can share one problem.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np


class FitError(RuntimeError):
    """Base class for fitting failures."""


class EvaluationError(FitError):
    """The residual function returned non-finite values."""

    def __init__(self, message, params):
        super().__init__(f"{message} at params={np.array2string(np.asarray(params), precision=6)}")
        self.params = np.asarray(params, dtype=float).copy()


class IllConditionedError(FitError):
    """Normal equations are singular at the optimum.

    ``unconstrained`` lists the parameter names that dominate the null space.
    ``result`` carries the (covariance-less) best fit.
    """

    def __init__(self, message, unconstrained, result=None):
        super().__init__(message)
        self.unconstrained = list(unconstrained)
        self.result = result


class ConvergenceError(FitError):
    """Raised by callers that demand convergence; carries the best-so-far result."""

    def __init__(self, message, result):
        super().__init__(message)
        self.result = result


class Status(enum.Enum):
    CONVERGED = "converged"
    MAX_ITER = "max_iter"
    STALLED = "stalled"


@dataclass
class FitProblem:
    residual: Callable[[np.ndarray], np.ndarray]
    x0: Sequence[float]
    lower: Sequence[float] | None = None
    upper: Sequence[float] | None = None
    weights: Sequence[float] | None = None
    jacobian: Callable[[np.ndarray], np.ndarray] | None = None
    names: Sequence[str] | None = None
    # typical magnitude per parameter, sets finite-difference steps near zero
    typical: Sequence[float] | None = None

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float).copy()
        n = self.x0.size
        self.lower = np.full(n, -np.inf) if self.lower is None else np.asarray(self.lower, dtype=float)
        self.upper = np.full(n, np.inf) if self.upper is None else np.asarray(self.upper, dtype=float)
        if self.lower.shape != (n,) or self.upper.shape != (n,):
            raise ValueError("bounds must match the parameter count")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")
        if np.any(self.x0 < self.lower) or np.any(self.x0 > self.upper):
            raise ValueError("initial guess outside bounds")
        if self.names is None:
            self.names = [f"p{i}" for i in range(n)]
        self.names = list(self.names)
        if self.typical is None:
            self.typical = np.where(self.x0 != 0, np.abs(self.x0), 1.0)
        self.typical = np.asarray(self.typical, dtype=float)
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=float)
            if np.any(self.weights < 0):
                raise ValueError("weights must be non-negative")

    def weighted_residual(self, x):
        r = np.asarray(self.residual(x), dtype=float).ravel()
        if not np.all(np.isfinite(r)):
            raise EvaluationError("non-finite residual", x)
        if self.weights is not None:
            r = r * np.sqrt(self.weights)
        return r


@dataclass
class SolverOptions:
    g_tol: float = 1e-10
    x_tol: float = 1e-10
    f_tol: float = 1e-15
    max_iter: int = 200
    rel_step: float = 1e-6
    absolute_sigma: bool = False
    cond_limit: float = 1e10


@dataclass
class FitResult:
    x: np.ndarray
    names: list
    covariance: np.ndarray | None
    residuals: np.ndarray
    cost: float  # 0.5 * sum of squared weighted residuals
    n_iter: int
    n_eval: int
    status: Status
    message: str
    condition: float
    dof: int
    at_bound: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def converged(self):
        return self.status is Status.CONVERGED

    @property
    def covariance_reliable(self):
        return self.converged and self.covariance is not None and self.condition <= 1e10

    @property
    def stderr(self):
        if self.covariance is None:
            return np.full(self.x.size, np.nan)
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    @property
    def chi2(self):
        return 2.0 * self.cost

    def as_dict(self):
        return dict(zip(self.names, self.x))

    def __getitem__(self, name):
        return self.x[self.names.index(name)]

    def sigma(self, name):
        return self.stderr[self.names.index(name)]


def numeric_jacobian(fun, x, lower=None, upper=None, rel_step=1e-6, typical=None):
    """Finite-difference Jacobian of ``fun`` at ``x``.

    Central differences with step ``rel_step * max(|x_j|, typical_j)``;
    one-sided (pointing into the box) when a central probe would leave the
    bounds.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    lower = np.full(n, -np.inf) if lower is None else np.asarray(lower, dtype=float)
    upper = np.full(n, np.inf) if upper is None else np.asarray(upper, dtype=float)
    typical = np.ones(n) if typical is None else np.asarray(typical, dtype=float)
    f0 = None
    cols = []
    for j in range(n):
        h = rel_step * max(abs(x[j]), typical[j])
        if h == 0.0:
            h = rel_step
        up_ok = x[j] + h <= upper[j]
        dn_ok = x[j] - h >= lower[j]
        xp = x.copy()
        xm = x.copy()
        if up_ok and dn_ok:
            xp[j] += h
            xm[j] -= h
            fp = _probe(fun, xp)
            fm = _probe(fun, xm)
            cols.append((fp - fm) / (xp[j] - xm[j]))
            continue
        if f0 is None:
            f0 = _probe(fun, x)
        if up_ok:
            xp[j] += h
            cols.append((_probe(fun, xp) - f0) / (xp[j] - x[j]))
        elif dn_ok:
            xm[j] -= h
            cols.append((f0 - _probe(fun, xm)) / (x[j] - xm[j]))
        else:
            # box narrower than the step: parameter is effectively fixed
            if f0 is None:
                f0 = _probe(fun, x)
            cols.append(np.zeros_like(f0))
    return np.column_stack(cols) if cols else np.zeros((0, 0))


def _probe(fun, x):
    f = np.asarray(fun(x), dtype=float).ravel()
    if not np.all(np.isfinite(f)):
        raise EvaluationError("non-finite residual during differencing", x)
    return f


def solve(problem: FitProblem, options: SolverOptions | None = None) -> FitResult:
    opts = options or SolverOptions()
    lo, hi = problem.lower, problem.upper
    x = problem.x0.copy()
    n = x.size
    sqrt_w = None if problem.weights is None else np.sqrt(problem.weights)

    def jac(xx):
        if problem.jacobian is not None:
            J = np.asarray(problem.jacobian(xx), dtype=float)
            if sqrt_w is not None:
                J = J * sqrt_w[:, None]
            return J
        return numeric_jacobian(problem.weighted_residual, xx, lo, hi,
                                opts.rel_step, problem.typical)

    r = problem.weighted_residual(x)
    n_eval = 1
    m = r.size
    cost = 0.5 * float(r @ r)
    J = jac(x)
    if not np.all(np.isfinite(J)):
        raise EvaluationError("non-finite Jacobian", x)
    col_norm = np.linalg.norm(J, axis=0)
    d = np.where(col_norm > 0, col_norm, 1.0)
    mu = 1e-3 * float(np.max(col_norm ** 2 / d ** 2)) if n else 0.0
    mu = mu if mu > 0 else 1e-3

    status = Status.MAX_ITER
    message = "maximum iterations reached"
    n_iter = 0
    while n_iter < opts.max_iter:
        n_iter += 1
        g = J.T @ r
        free = _free_mask(x, g, lo, hi)
        rnorm = math.sqrt(2.0 * cost)
        if rnorm == 0.0:
            status, message = Status.CONVERGED, "zero residual"
            break
        cn = np.linalg.norm(J, axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            cosines = np.where(cn > 0, np.abs(g) / (cn * rnorm), 0.0)
        if not np.any(free) or np.max(cosines[free]) <= opts.g_tol:
            status, message = Status.CONVERGED, "gradient tolerance"
            break

        d = np.maximum(d, cn)
        step = np.zeros(n)
        Jf = J[:, free]
        # solve in column-scaled coordinates so tiny parameters keep their rank
        df = d[free]
        A = np.vstack([Jf / df, math.sqrt(mu) * np.eye(int(free.sum()))])
        b = np.concatenate([-r, np.zeros(int(free.sum()))])
        step[free] = np.linalg.lstsq(A, b, rcond=None)[0] / df
        x_trial = np.clip(x + step, lo, hi)
        dx = x_trial - x
        if np.linalg.norm(dx * d) <= opts.x_tol * (np.linalg.norm(x * d) + opts.x_tol):
            status, message = Status.CONVERGED, "step tolerance"
            break

        n_eval += 1
        try:
            r_trial = problem.weighted_residual(x_trial)
            cost_trial = 0.5 * float(r_trial @ r_trial)
        except EvaluationError:
            # overshoot into a non-finite region counts as a rejected step
            cost_trial = math.inf
        if cost_trial < cost:
            reduction = cost - cost_trial
            x, r = x_trial, r_trial
            cost_prev, cost = cost, cost_trial
            mu /= 3.0
            J = jac(x)
            if not np.all(np.isfinite(J)):
                raise EvaluationError("non-finite Jacobian", x)
            if reduction <= opts.f_tol * cost_prev:
                status, message = Status.CONVERGED, "cost tolerance"
                break
        else:
            mu *= 2.0
            if mu > 1e300 or not math.isfinite(mu):
                status, message = Status.STALLED, "damping diverged without a descent step"
                break

    if status is Status.CONVERGED and cost > 0:
        # undamped Gauss-Newton polish; exact for residuals linear in the parameters
        free = _free_mask(x, J.T @ r, lo, hi)
        if np.any(free):
            step = np.zeros(n)
            cs = np.linalg.norm(J[:, free], axis=0)
            cs = np.where(cs > 0, cs, 1.0)
            step[free] = np.linalg.lstsq(J[:, free] / cs, -r, rcond=None)[0] / cs
            x_trial = np.clip(x + step, lo, hi)
            r_trial = problem.weighted_residual(x_trial)
            n_eval += 1
            # accept ties within rounding: near the optimum the cost change is below eps
            if 0.5 * float(r_trial @ r_trial) <= cost * (1.0 + 1e-12):
                x, r = x_trial, r_trial
                cost = 0.5 * float(r @ r)
                J = jac(x)

    at_bound = (x <= lo) | (x >= hi)
    cov, cond, null_names = _covariance(J, r, n, m, opts, problem.names)
    result = FitResult(
        x=x, names=problem.names, covariance=cov, residuals=r, cost=cost,
        n_iter=n_iter, n_eval=n_eval, status=status, message=message,
        condition=cond, dof=m - n, at_bound=at_bound,
    )
    if null_names:
        raise IllConditionedError(
            "singular normal equations; unconstrained: " + ", ".join(null_names),
            null_names, result)
    return result


def _free_mask(x, g, lo, hi):
    # a parameter pinned at a bound with the descent direction pointing outward is frozen
    at_lo = (x <= lo) & (g > 0)
    at_hi = (x >= hi) & (g < 0)
    return ~(at_lo | at_hi)


_SINGULAR_RATIO = 1e-7


def _covariance(J, r, n, m, opts, names):
    if n == 0:
        return np.zeros((0, 0)), 1.0, []
    cn = np.linalg.norm(J, axis=0)
    dead = [names[j] for j in range(n) if cn[j] == 0.0]
    if dead:
        return None, math.inf, dead
    Jn = J / cn
    U, s, Vt = np.linalg.svd(Jn, full_matrices=False)
    # below ~1e-7 the smallest singular value is at finite-difference resolution
    if s[-1] <= s[0] * max(_SINGULAR_RATIO, max(m, n) * np.finfo(float).eps):
        v = Vt[-1]
        worst = np.argsort(-np.abs(v))
        picked = [names[j] for j in worst if abs(v[j]) >= 0.3 * abs(v[worst[0]])]
        return None, math.inf, picked
    cond = float((s[0] / s[-1]) ** 2)
    cov_n = (Vt.T / s ** 2) @ Vt
    cov = cov_n / np.outer(cn, cn)
    if not opts.absolute_sigma:
        if m > n:
            cov = cov * float(r @ r) / (m - n)
        else:
            cov = cov * np.nan
    cov = 0.5 * (cov + cov.T)
    return cov, cond, []


# ---------------------------------------------------------------- Monte Carlo

@dataclass(frozen=True)
class Normal:
    mean: float
    std: float

    def sample(self, rng, n):
        if self.std == 0:
            return np.full(n, float(self.mean))
        return rng.normal(self.mean, self.std, n)


@dataclass(frozen=True)
class LogNormal:
    """Multiplicative uncertainty: ``median * exp(N(0, sigma_log))``."""

    median: float
    sigma_log: float

    def sample(self, rng, n):
        if self.sigma_log == 0:
            return np.full(n, float(self.median))
        return self.median * np.exp(rng.normal(0.0, self.sigma_log, n))


@dataclass(frozen=True)
class Fixed:
    value: float

    def sample(self, rng, n):
        return np.full(n, float(self.value))


def relative_normal(nominal, half_width_95):
    """Normal input whose central 95 % interval is ``nominal * (1 +- half_width_95)``."""
    return Normal(nominal, abs(nominal) * half_width_95 / 1.959963984540054)


def db_normal(nominal_db, half_width_95_db):
    """Gain uncertainty in dB with a 95 % half-width, returned as a dB-valued Normal."""
    return Normal(nominal_db, half_width_95_db / 1.959963984540054)


@dataclass
class MonteCarloSummary:
    mean: float
    std: float
    percentiles: dict
    n_samples: int
    n_failed: int
    samples: np.ndarray

    @property
    def failure_rate(self):
        return self.n_failed / self.n_samples if self.n_samples else 0.0

    @property
    def half_width_95(self):
        """Half of the central 95 % interval."""
        return 0.5 * (self.percentiles[97.5] - self.percentiles[2.5])

    @property
    def relative_half_width_95(self):
        return self.half_width_95 / abs(self.percentiles[50.0])


_PERCENTILES = (2.5, 16.0, 50.0, 84.0, 97.5)


def monte_carlo_propagate(fn, inputs: Mapping[str, object], n_samples: int, seed: int,
                          vectorized: bool = False) -> MonteCarloSummary:
    """Propagate input distributions through ``fn`` by sampling.

    ``inputs`` maps keyword names to distributions exposing
    ``sample(rng, n)`` (the classes above) or scipy-style ``rvs``.
    With ``vectorized=True`` ``fn`` receives arrays and must return an array
    of length ``n_samples``; non-finite outputs count as failures. Otherwise
    ``fn`` is called per sample and exceptions count as failures.
    """
    if n_samples < 100:
        raise ValueError("n_samples must be >= 100")
    rng = np.random.default_rng(seed)
    draws = {}
    for name in sorted(inputs):
        dist = inputs[name]
        if hasattr(dist, "sample"):
            draws[name] = np.asarray(dist.sample(rng, n_samples), dtype=float)
        elif hasattr(dist, "rvs"):
            draws[name] = np.asarray(dist.rvs(size=n_samples, random_state=rng), dtype=float)
        else:
            draws[name] = np.full(n_samples, float(dist))

    if vectorized:
        out = np.asarray(fn(**draws), dtype=float).reshape(n_samples)
    else:
        out = np.empty(n_samples)
        for i in range(n_samples):
            try:
                out[i] = float(fn(**{k: v[i] for k, v in draws.items()}))
            except Exception:  # noqa: BLE001 - a failed sample is data, not a crash
                out[i] = np.nan
    ok = np.isfinite(out)
    good = out[ok]
    if good.size == 0:
        raise FitError("every Monte-Carlo sample failed")
    pct = dict(zip(_PERCENTILES, np.percentile(good, _PERCENTILES)))
    return MonteCarloSummary(
        mean=float(good.mean()), std=float(good.std(ddof=1)) if good.size > 1 else 0.0,
        percentiles={k: float(v) for k, v in pct.items()},
        n_samples=n_samples, n_failed=int((~ok).sum()), samples=out,
    )
