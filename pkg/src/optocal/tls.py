"""Saturable two-level-system loss in the cavity and in the TWPA.

Cavity internal damping::

    kappa_in(T, P) = kappa_tls0 * tanh(h f_c / 2 k_B T) * P0(T) / (P0(T) + P) + kappa_bcs(T)
    kappa_bcs(T)   = kappa_dielec0 + alpha * (T_c / T) * exp(-3.3 T_c / T)

TWPA transmission (pump off)::

    delta(T, P) = 1 - lambda0 * tanh(h f_c / 2 k_B T) / sqrt(1 + (P / P0(T)) ** beta)

The critical powers P0(T) are not modelled; they are free per-temperature
values kept in a :class:`TemperatureTable`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import constants
from .fitting import FitProblem, FitResult, IllConditionedError, SolverOptions, solve
from .units import AngularRate, Frequency


class TemperatureRangeError(ValueError):
    """Temperature outside a table's measured range with extrapolation disabled."""


class IdentifiabilityError(ValueError):
    """The data cannot constrain one or more parameters."""

    def __init__(self, message, parameters):
        super().__init__(message)
        self.parameters = list(parameters)


class MattisBardeenRangeWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class TemperatureTable:
    """Positive values tabulated at strictly increasing temperatures.

    Between entries ``log(value)`` is interpolated linearly in ``T``. Beyond
    the end points the nearest segment is extended, but only on request.
    """

    temperatures: tuple
    values: tuple

    def __post_init__(self):
        t = tuple(float(x) for x in self.temperatures)
        v = tuple(float(x) for x in self.values)
        if not t or len(t) != len(v):
            raise ValueError("table needs matching, non-empty temperature and value lists")
        if any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError("table temperatures must be strictly increasing")
        if any(x <= 0 for x in t) or any(not np.isfinite(x) or x <= 0 for x in v):
            raise ValueError("table temperatures and values must be positive and finite")
        object.__setattr__(self, "temperatures", t)
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, value, t=1.0):
        return cls((t,), (value,))

    @classmethod
    def from_mapping(cls, mapping):
        items = sorted((float(k), float(v)) for k, v in mapping.items())
        return cls(tuple(k for k, _ in items), tuple(v for _, v in items))

    def as_dict(self):
        return dict(zip(self.temperatures, self.values))

    def covers(self, t, rtol=1e-9):
        t = np.asarray(t, dtype=float)
        lo, hi = self.temperatures[0], self.temperatures[-1]
        return bool(np.all((t >= lo * (1 - rtol)) & (t <= hi * (1 + rtol))))

    def __call__(self, t, extrapolate=False):
        t_arr = np.asarray(t, dtype=float)
        ts = np.asarray(self.temperatures)
        vs = np.asarray(self.values)
        if len(ts) == 1:
            if not extrapolate and not np.all(np.isclose(t_arr, ts[0], rtol=1e-9, atol=0)):
                raise TemperatureRangeError(f"table only defined at T={ts[0]} K")
            out = np.full(t_arr.shape, vs[0])
            return float(out) if np.ndim(out) == 0 else out
        if not extrapolate and not self.covers(t_arr):
            raise TemperatureRangeError(
                f"T outside the tabulated range [{ts[0]}, {ts[-1]}] K; enable extrapolation")
        logv = np.log(vs)
        idx = np.clip(np.searchsorted(ts, t_arr) - 1, 0, len(ts) - 2)
        t0, t1 = ts[idx], ts[idx + 1]
        w = (t_arr - t0) / (t1 - t0)
        out = np.exp(logv[idx] + w * (logv[idx + 1] - logv[idx]))
        # exact table hits return the stored value bit-for-bit
        hit = np.isin(t_arr, ts)
        if np.any(hit):
            out = np.where(hit, vs[np.clip(np.searchsorted(ts, t_arr), 0, len(ts) - 1)], out)
        return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class TlsLossParams:
    kappa_tls0: AngularRate
    p_cav0: TemperatureTable
    kappa_dielec0: AngularRate
    alpha: AngularRate
    t_c: float
    f_c: Frequency
    extrapolate: bool = False

    def __post_init__(self):
        for name in ("kappa_tls0", "kappa_dielec0", "alpha"):
            value = AngularRate(getattr(self, name))
            if value < 0:
                raise ValueError(f"{name} must be >= 0")
            object.__setattr__(self, name, value)
        object.__setattr__(self, "f_c", Frequency(self.f_c))
        if not self.t_c > 0:
            raise ValueError("t_c must be > 0")

    @property
    def gap(self):
        """Superconducting gap Delta(0) in joules."""
        return constants.BCS_GAP_RATIO * constants.K_B * self.t_c


@dataclass(frozen=True)
class TwpaTlsParams:
    lambda0: float
    beta: float
    p_twpa0: TemperatureTable
    f_c: Frequency
    extrapolate: bool = False

    def __post_init__(self):
        if not 0.0 <= self.lambda0 < 1.0:
            raise ValueError("lambda0 must lie in [0, 1)")
        if not self.beta > 0:
            raise ValueError("beta must be > 0")
        object.__setattr__(self, "f_c", Frequency(self.f_c))


def tanh_factor(f_c, t):
    """tanh(h f_c / 2 k_B T), the thermal depolarisation of resonant TLSs."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("temperature must be > 0")
    out = np.tanh(constants.H * float(f_c) / (2.0 * constants.K_B * t))
    return float(out) if np.ndim(out) == 0 else out


def kappa_bcs(params: TlsLossParams, t):
    """Dielectric floor plus the thermally activated quasiparticle loss."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("temperature must be > 0")
    if np.any(t > 0.5 * params.t_c):
        warnings.warn(f"quasiparticle loss used above T_c/2 = {0.5 * params.t_c:.3g} K",
                      MattisBardeenRangeWarning, stacklevel=2)
    out = params.kappa_dielec0 + params.alpha * (params.t_c / t) * np.exp(
        -constants.BCS_GAP_RATIO * params.t_c / t)
    return float(out) if np.ndim(out) == 0 else out


def tls_saturation_fraction(p0, p_in):
    """Unsaturated fraction P0 / (P0 + P); equals 1 at zero power, 0 at infinite power."""
    p_in = np.asarray(p_in, dtype=float)
    with np.errstate(invalid="ignore"):
        out = np.where(np.isinf(p_in), 0.0, p0 / (p0 + p_in))
    return float(out) if np.ndim(out) == 0 else out


def kappa_tls(params: TlsLossParams, t, p_in, extrapolate=None):
    ext = params.extrapolate if extrapolate is None else extrapolate
    p0 = params.p_cav0(t, extrapolate=ext)
    return params.kappa_tls0 * tanh_factor(params.f_c, t) * tls_saturation_fraction(p0, p_in)


def kappa_in(params: TlsLossParams, t, p_in, extrapolate=None):
    """Internal cavity damping rate [rad/s] at temperature ``t`` and on-chip power ``p_in``."""
    return kappa_tls(params, t, p_in, extrapolate) + kappa_bcs(params, t)


def twpa_lambda(params: TwpaTlsParams, t):
    return params.lambda0 * tanh_factor(params.f_c, t)


def twpa_transmission(params: TwpaTlsParams, t, p_in, extrapolate=None):
    """Pump-off TWPA transmission relative to the TLS-saturated level, in (0, 1]."""
    ext = params.extrapolate if extrapolate is None else extrapolate
    p0 = params.p_twpa0(t, extrapolate=ext)
    ratio = np.asarray(p_in, dtype=float) / p0
    with np.errstate(over="ignore"):
        out = 1.0 - twpa_lambda(params, t) / np.sqrt(1.0 + ratio ** params.beta)
    return float(out) if np.ndim(out) == 0 else out


# ------------------------------------------------------------------- fitting

def _group(points, min_points):
    arr = np.asarray(points, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError("points must be a sequence of (T, P_in, value) triples")
    if not np.all(np.isfinite(arr)):
        raise ValueError("points contain non-finite values")
    if np.any(arr[:, 0] <= 0) or np.any(arr[:, 1] <= 0):
        raise ValueError("temperatures and powers must be > 0")
    temps = np.unique(arr[:, 0])
    slices = []
    for t in temps:
        sel = arr[:, 0] == t
        if sel.sum() < min_points:
            raise ValueError(f"slice T={t:g} K has {int(sel.sum())} points, needs >= {min_points}")
        if np.unique(arr[sel, 1]).size < 2:
            raise IdentifiabilityError(
                f"no power variation at T={t:g} K; critical power unconstrained",
                [f"p0[T={t:g}]"])
        slices.append(np.nonzero(sel)[0])
    return arr, temps, slices


def _crossing_power(p, y, level):
    """Power where ``y`` crosses ``level``, interpolated in log P."""
    order = np.argsort(p)
    p, y = p[order], y[order]
    for i in range(len(p) - 1):
        a, b = y[i] - level, y[i + 1] - level
        if a == 0:
            return p[i]
        if a * b < 0:
            w = a / (a - b)
            return float(np.exp(np.log(p[i]) + w * (np.log(p[i + 1]) - np.log(p[i]))))
    return float(np.exp(np.mean(np.log(p))))


@dataclass
class TlsCavityFit:
    params: TlsLossParams
    result: FitResult
    temperatures: np.ndarray
    slice_residuals: dict  # T -> residual array (in fit units)
    kappa_ext: float
    stderr: dict = field(default_factory=dict)

    def kappa_tot(self, t, p_in):
        return self.kappa_ext + kappa_in(self.params, t, p_in)


def fit_tls_cavity(points, kappa_ext, f_c, init: TlsLossParams | None = None,
                   sigma=None, fix_tc: float | None = None, fit_bcs: bool = True,
                   t_c_guess: float = 1.2, options: SolverOptions | None = None) -> TlsCavityFit:
    """Joint fit of measured total damping ``(T, P_in, kappa_tot)``.

    Shared parameters: ``kappa_tls0, kappa_dielec0, alpha, t_c``; one free
    critical power per temperature. ``kappa_ext`` is held fixed. Residuals
    are logarithmic (relative) unless per-point ``sigma`` [rad/s] is given.
    With ``fit_bcs=False`` the quasiparticle term is switched off
    (``alpha = 0``), for data sets that stay well below T_c / 10.
    """
    arr, temps, slices = _group(points, 5)
    t_all, p_all, k_all = arr.T
    kin_meas = k_all - kappa_ext
    fc = float(f_c)
    if fix_tc is not None or not fit_bcs:
        tc_fixed = float(fix_tc if fix_tc is not None else t_c_guess)
    else:
        tc_fixed = None

    if init is None:
        x_tls, x_diel, x_alpha, x_tc, p0s = _cavity_guess(
            temps, slices, t_all, p_all, kin_meas, fc, tc_fixed or t_c_guess, fit_bcs)
    else:
        x_tls, x_diel, x_alpha, x_tc = (float(init.kappa_tls0), float(init.kappa_dielec0),
                                        float(init.alpha), float(init.t_c))
        p0s = [init.p_cav0(t, extrapolate=True) for t in temps]

    names = ["kappa_tls0", "kappa_dielec0"]
    x0 = [x_tls, x_diel]
    lower = [0.0, 0.0]
    upper = [np.inf, np.inf]
    typical = [max(x_tls, 1.0), max(x_diel, 1.0)]
    if fit_bcs:
        names.append("alpha")
        x0.append(x_alpha)
        lower.append(0.0)
        upper.append(np.inf)
        typical.append(max(x_alpha, 1.0))
        if tc_fixed is None:
            names.append("t_c")
            x0.append(x_tc)
            lower.append(0.02)
            upper.append(50.0)
            typical.append(1.0)
    n_shared = len(names)
    names += [f"p0[T={t:g}]" for t in temps]
    x0 += list(p0s)
    lower += [p * 1e-8 for p in p0s]
    upper += [p * 1e8 for p in p0s]
    typical += list(p0s)

    slice_index = np.empty(t_all.size, dtype=int)
    for i, sel in enumerate(slices):
        slice_index[sel] = i
    tanh_t = tanh_factor(fc, t_all)
    inv_t = 1.0 / t_all

    def unpack(x):
        k_tls, k_diel = x[0], x[1]
        alpha = x[2] if fit_bcs else 0.0
        tc = tc_fixed if tc_fixed is not None else x[3]
        return k_tls, k_diel, alpha, tc, np.asarray(x[n_shared:])

    def model(x):
        k_tls, k_diel, alpha, tc, p0 = unpack(x)
        p0_pt = p0[slice_index]
        bcs = k_diel + alpha * tc * inv_t * np.exp(-constants.BCS_GAP_RATIO * tc * inv_t)
        return kappa_ext + k_tls * tanh_t * p0_pt / (p0_pt + p_all) + bcs

    if sigma is None:
        log_meas = np.log(k_all)

        def residual(x):
            return np.log(model(x)) - log_meas
    else:
        sig = np.broadcast_to(np.asarray(sigma, dtype=float), k_all.shape)

        def residual(x):
            return (model(x) - k_all) / sig

    problem = FitProblem(residual, x0, lower, upper, names=names, typical=typical)
    try:
        result = solve(problem, options)
    except IllConditionedError as exc:
        raise IdentifiabilityError(
            "cavity TLS fit is degenerate; unconstrained: " + ", ".join(exc.unconstrained),
            exc.unconstrained) from exc

    k_tls, k_diel, alpha, tc, p0 = unpack(result.x)
    params = TlsLossParams(
        kappa_tls0=k_tls, p_cav0=TemperatureTable(tuple(temps), tuple(p0)),
        kappa_dielec0=k_diel, alpha=alpha, t_c=tc, f_c=fc)
    res = result.residuals
    return TlsCavityFit(
        params=params, result=result, temperatures=temps,
        slice_residuals={float(t): res[sel] for t, sel in zip(temps, slices)},
        kappa_ext=float(kappa_ext),
        stderr=dict(zip(names, result.stderr)),
    )


def _cavity_guess(temps, slices, t_all, p_all, kin, fc, tc, fit_bcs):
    his, los, p0s = [], [], []
    for t, sel in zip(temps, slices):
        order = np.argsort(p_all[sel])
        k = kin[sel][order]
        p = p_all[sel][order]
        hi, lo = float(k[0]), float(k[-1])
        his.append(hi)
        los.append(lo)
        p0s.append(_crossing_power(p, k, 0.5 * (hi + lo)) if hi > lo else float(np.exp(np.mean(np.log(p)))))
    his, los = np.array(his), np.array(los)
    cold = temps <= 0.25
    if not np.any(cold):
        cold = temps == temps.min()
    amp = (his - los) / tanh_factor(fc, temps)
    k_tls = float(np.median(amp[cold])) if np.any(amp[cold] > 0) else float(np.max(np.abs(his)))
    k_diel = float(max(np.min(los[cold]), 0.0))
    alpha = 0.0
    if fit_bcs:
        t_hot = temps[-1]
        excess = los[-1] - k_diel
        shape = (tc / t_hot) * np.exp(-constants.BCS_GAP_RATIO * tc / t_hot)
        alpha = excess / shape if excess > 0 else 1e-3 * max(k_diel, 1.0) / shape
    return max(k_tls, 1.0), k_diel, float(alpha), tc, p0s


@dataclass
class TwpaTlsFit:
    params: TwpaTlsParams
    result: FitResult
    temperatures: np.ndarray
    slice_residuals: dict
    stderr: dict = field(default_factory=dict)

    def lambda_at(self, t):
        return twpa_lambda(self.params, t)

    def sigma_lambda_at(self, t):
        return self.stderr["lambda0"] * tanh_factor(self.params.f_c, t)


def fit_tls_twpa(points, f_c, init: TwpaTlsParams | None = None, sigma=None,
                 options: SolverOptions | None = None) -> TwpaTlsFit:
    """Joint fit of pump-off transmission ``(T, P_in, delta)``.

    Shared ``lambda0`` and ``beta``, one free critical power per temperature.
    """
    arr, temps, slices = _group(points, 5)
    t_all, p_all, d_all = arr.T
    fc = float(f_c)
    tanh_t = tanh_factor(fc, t_all)

    if init is None:
        drops, p0s = [], []
        for t, sel in zip(temps, slices):
            order = np.argsort(p_all[sel])
            drop = 1.0 - d_all[sel][order]
            p = p_all[sel][order]
            d0 = float(drop[0])
            drops.append(d0 / tanh_factor(fc, t))
            p0s.append(_crossing_power(p, drop, d0 / np.sqrt(2.0)) if d0 > 0 else float(np.exp(np.mean(np.log(p)))))
        lam0 = float(np.clip(np.max(drops), 1e-3, 0.99))
        beta0 = 1.0
    else:
        lam0, beta0 = init.lambda0, init.beta
        p0s = [init.p_twpa0(t, extrapolate=True) for t in temps]

    slice_index = np.empty(t_all.size, dtype=int)
    for i, sel in enumerate(slices):
        slice_index[sel] = i
    names = ["lambda0", "beta"] + [f"p0[T={t:g}]" for t in temps]

    def model(x):
        lam, beta = x[0], x[1]
        p0 = np.asarray(x[2:])[slice_index]
        return 1.0 - lam * tanh_t / np.sqrt(1.0 + (p_all / p0) ** beta)

    sig = 1.0 if sigma is None else np.broadcast_to(np.asarray(sigma, dtype=float), d_all.shape)

    def residual(x):
        return (model(x) - d_all) / sig

    problem = FitProblem(
        residual, [lam0, beta0] + list(p0s),
        lower=[0.0, 1e-3] + [p * 1e-8 for p in p0s],
        upper=[1.0 - 1e-9, 10.0] + [p * 1e8 for p in p0s],
        names=names, typical=[0.1, 1.0] + list(p0s),
    )
    try:
        result = solve(problem, options)
    except IllConditionedError as exc:
        raise IdentifiabilityError(
            "TWPA TLS fit is degenerate; unconstrained: " + ", ".join(exc.unconstrained),
            exc.unconstrained) from exc
    params = TwpaTlsParams(lambda0=float(result.x[0]), beta=float(result.x[1]),
                           p_twpa0=TemperatureTable(tuple(temps), tuple(result.x[2:])), f_c=fc)
    return TwpaTlsFit(
        params=params, result=result, temperatures=temps,
        slice_residuals={float(t): result.residuals[sel] for t, sel in zip(temps, slices)},
        stderr=dict(zip(names, result.stderr)),
    )


def with_extrapolation(params, enabled=True):
    return replace(params, extrapolate=enabled)
