"""Reflection line shape of a one-port cavity and its magnitude fit.

The reflection magnitude only depends on the *difference* of the external
and internal rates through ``|kappa_ext - kappa_in|``, so a magnitude fit
determines the resonance, the total rate and the dip depth, and leaves the
assignment of the two partial rates open. :func:`fit_reflection` therefore
returns both candidates; choosing one is left to the calibration pipeline.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import constants
from .fitting import ConvergenceError, FitProblem, FitResult, SolverOptions, solve
from .units import AngularRate, Frequency

DEFAULT_FLOOR_DB = -200.0


class CouplingBranch(enum.Enum):
    OVERCOUPLED = "overcoupled"
    UNDERCOUPLED = "undercoupled"

    @property
    def other(self):
        return (CouplingBranch.UNDERCOUPLED if self is CouplingBranch.OVERCOUPLED
                else CouplingBranch.OVERCOUPLED)


class InsufficientSpanError(ValueError):
    """The trace does not cover enough linewidths to constrain a fit."""


@dataclass(frozen=True)
class CavityParams:
    f_c: Frequency
    kappa_ext: AngularRate
    kappa_in: AngularRate

    def __post_init__(self):
        object.__setattr__(self, "f_c", Frequency(self.f_c))
        object.__setattr__(self, "kappa_ext", AngularRate(self.kappa_ext))
        object.__setattr__(self, "kappa_in", AngularRate(self.kappa_in))
        if self.f_c <= 0:
            raise ValueError("f_c must be > 0")
        if self.kappa_ext <= 0:
            raise ValueError("kappa_ext must be > 0")
        if self.kappa_in < 0:
            raise ValueError("kappa_in must be >= 0")

    @classmethod
    def from_hz(cls, f_c, kappa_ext_hz, kappa_in_hz):
        return cls(Frequency(f_c), AngularRate.from_hz(kappa_ext_hz),
                   AngularRate.from_hz(kappa_in_hz))

    @property
    def omega_c(self):
        return self.f_c.angular

    @property
    def kappa_tot(self):
        return AngularRate(self.kappa_ext + self.kappa_in)

    @property
    def q_ext(self):
        return self.omega_c / self.kappa_ext

    @property
    def q_in(self):
        return self.omega_c / self.kappa_in if self.kappa_in > 0 else np.inf

    @property
    def q_tot(self):
        return 1.0 / (1.0 / self.q_ext + 1.0 / self.q_in)

    @property
    def branch(self):
        return (CouplingBranch.OVERCOUPLED if self.kappa_ext > self.kappa_in
                else CouplingBranch.UNDERCOUPLED)

    def swapped(self):
        """The magnitude-equivalent partner with the two partial rates exchanged."""
        if self.kappa_in == 0:
            raise ValueError("a lossless cavity has no swapped partner")
        return CavityParams(self.f_c, self.kappa_in, self.kappa_ext)


@dataclass
class ReflectionTrace:
    """Calibrated reflection sweep; ``mag_db`` is 20*log10 of the amplitude ratio."""

    freq_hz: np.ndarray
    mag_db: np.ndarray
    re: np.ndarray | None = None
    im: np.ndarray | None = None

    def __post_init__(self):
        self.freq_hz = np.asarray(self.freq_hz, dtype=float)
        self.mag_db = np.asarray(self.mag_db, dtype=float)
        if self.freq_hz.ndim != 1 or self.freq_hz.shape != self.mag_db.shape:
            raise ValueError("frequency and magnitude arrays must be 1-D and equal length")
        if not np.all(np.isfinite(self.freq_hz)) or not np.all(np.isfinite(self.mag_db)):
            raise ValueError("trace contains non-finite values")
        if np.any(np.diff(self.freq_hz) <= 0):
            raise ValueError("trace frequencies must be strictly increasing")

    @classmethod
    def from_complex(cls, freq_hz, re, im):
        re = np.asarray(re, dtype=float)
        im = np.asarray(im, dtype=float)
        mag = 20.0 * np.log10(np.hypot(re, im))
        return cls(freq_hz, mag, re, im)

    @property
    def span(self):
        return float(self.freq_hz[-1] - self.freq_hz[0])


def s11_complex(params: CavityParams, f):
    """Complex reflection coefficient in the quality-factor form."""
    f = np.asarray(f, dtype=float)
    q_ext = params.q_ext
    q_tot = params.omega_c / params.kappa_tot
    x = 2j * q_tot * (f - params.f_c) / params.f_c
    return ((q_ext - 2.0 * q_tot) / q_ext + x) / (1.0 + x)


def s11_db(params: CavityParams, f, floor_db=DEFAULT_FLOOR_DB, return_flag=False):
    """Reflection magnitude in dB, clamped at ``floor_db``.

    With ``return_flag`` also returns a boolean mask of clamped points (the
    critical-coupling zero).
    """
    amp = np.abs(s11_complex(params, f))
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(amp)
    clamped = db < floor_db
    db = np.where(clamped, floor_db, db)
    if np.ndim(db) == 0:
        db, clamped = float(db), bool(clamped)
    return (db, clamped) if return_flag else db


@dataclass
class ReflectionFit:
    result: FitResult
    f_ref: float
    f_c: Frequency
    kappa_tot: AngularRate
    depth: float  # |kappa_ext - kappa_in| / kappa_tot
    overcoupled: CavityParams
    undercoupled: CavityParams
    cov_over: np.ndarray  # covariance of (f_c [Hz], kappa_ext, kappa_in) [rad/s]
    cov_under: np.ndarray

    def params(self, branch: CouplingBranch) -> CavityParams:
        return self.overcoupled if branch is CouplingBranch.OVERCOUPLED else self.undercoupled

    def covariance(self, branch: CouplingBranch):
        return self.cov_over if branch is CouplingBranch.OVERCOUPLED else self.cov_under

    @property
    def sigma_f_c(self):
        return float(np.sqrt(self.cov_over[0, 0]))

    @property
    def sigma_kappa_tot(self):
        return float(self.result.sigma("kappa_tot_hz") * constants.TWO_PI)

    def sigma_kappa_ext(self, branch):
        return float(np.sqrt(self.covariance(branch)[1, 1]))

    @property
    def pair(self):
        return self.overcoupled, self.undercoupled


def _params_from_vector(p, f_ref, sign):
    off, k_hz, d = p
    k = constants.TWO_PI * k_hz
    return CavityParams(f_ref + off, 0.5 * k * (1 + sign * d), max(0.5 * k * (1 - sign * d), 0.0))


def _initial_guess(trace: ReflectionTrace):
    f = trace.freq_hz
    lin = 10.0 ** (trace.mag_db / 10.0)  # |S11|^2
    i0 = int(np.argmin(lin))
    floor = lin[i0]
    baseline = float(np.median(np.concatenate([lin[: max(len(lin) // 10, 1)],
                                               lin[-max(len(lin) // 10, 1):]])))
    half = 0.5 * (baseline + floor)
    left = np.nonzero(lin[:i0] > half)[0]
    right = np.nonzero(lin[i0:] > half)[0]
    f_lo = f[left[-1]] if left.size else f[0]
    f_hi = f[i0 + right[0]] if right.size else f[-1]
    width = max(f_hi - f_lo, 2.0 * float(np.min(np.diff(f))))
    depth = float(np.sqrt(min(floor / baseline, 1.0)))
    return f[i0], width, depth


def fit_reflection(trace: ReflectionTrace, init: CavityParams | None = None,
                   weighting: str = "db", floor_db: float = DEFAULT_FLOOR_DB,
                   options: SolverOptions | None = None) -> ReflectionFit:
    """Fit the reflection magnitude and return both coupling candidates.

    The fit runs on ``(f_c, kappa_tot, depth)``; the two candidates
    ``kappa_ext = kappa_tot * (1 +- depth) / 2`` share every residual.
    ``weighting`` selects residuals in dB (default) or linear amplitude.
    """
    if trace.freq_hz.size < 8:
        raise InsufficientSpanError("a reflection fit needs at least 8 points")
    f = trace.freq_hz
    f_ref = 0.5 * (f[0] + f[-1])
    if init is None:
        fc0, width0, d0 = _initial_guess(trace)
    else:
        fc0 = float(init.f_c)
        width0 = init.kappa_tot.hz
        d0 = abs(float(init.kappa_ext - init.kappa_in)) / float(init.kappa_tot)
    if trace.span < 3.0 * width0:
        raise InsufficientSpanError(
            f"trace spans {trace.span:.4g} Hz, less than 3 linewidths of {width0:.4g} Hz")

    data = trace.mag_db
    if weighting == "db":
        def residual(p):
            return s11_db(_params_from_vector(p, f_ref, 1), f, floor_db) - data
    elif weighting == "linear":
        data_lin = 10.0 ** (data / 20.0)

        def residual(p):
            return np.abs(s11_complex(_params_from_vector(p, f_ref, 1), f)) - data_lin
    else:
        raise ValueError(f"unknown weighting {weighting!r}")

    problem = FitProblem(
        residual,
        x0=[fc0 - f_ref, width0, min(max(d0, 0.0), 1.0 - 1e-12)],
        lower=[f[0] - f_ref, 1e-9 * width0, 0.0],
        upper=[f[-1] - f_ref, np.inf, 1.0 - 1e-12],
        names=["f_offset_hz", "kappa_tot_hz", "depth"],
        typical=[width0, width0, 1.0],
    )
    result = solve(problem, options)
    if not result.converged:
        raise ConvergenceError(f"reflection fit did not converge ({result.message})", result)
    off, k_hz, d = result.x
    if trace.span < 3.0 * k_hz:
        raise InsufficientSpanError(
            f"fitted linewidth {k_hz:.4g} Hz exceeds a third of the span {trace.span:.4g} Hz")

    over = _params_from_vector(result.x, f_ref, 1)
    under = _params_from_vector(result.x, f_ref, -1)
    cov = result.covariance if result.covariance is not None else np.full((3, 3), np.nan)
    covs = []
    for sign in (1, -1):
        # (f_c, kappa_ext, kappa_in) as a linear map of (offset, kappa_hz, depth) near the optimum
        T = np.array([
            [1.0, 0.0, 0.0],
            [0.0, np.pi * (1 + sign * d), np.pi * sign * k_hz],
            [0.0, np.pi * (1 - sign * d), -np.pi * sign * k_hz],
        ])
        covs.append(T @ cov @ T.T)
    return ReflectionFit(
        result=result, f_ref=f_ref, f_c=over.f_c, kappa_tot=over.kappa_tot, depth=float(d),
        overcoupled=over, undercoupled=under, cov_over=covs[0], cov_under=covs[1],
    )
