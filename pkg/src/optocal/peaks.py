"""Lorentzian sideband peaks in power spectral densities.

The peak model is::

    S(f) = B + A * (g / pi) / ((f - f0)**2 + g**2)

with ``g`` the half width at half maximum in Hz and ``A`` the integrated
area (PSD units times Hz). The mechanical damping follows as
``Gamma_eff = 2 pi * 2 g``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fitting import FitProblem, FitResult, SolverOptions, solve
from .units import AngularRate


class AbsentPeakError(ValueError):
    """No peak above the baseline."""


class PeakSpanError(ValueError):
    """The spectrum covers too few linewidths for a baseline estimate."""


@dataclass
class Spectrum:
    freq_hz: np.ndarray
    psd: np.ndarray

    def __post_init__(self):
        self.freq_hz = np.asarray(self.freq_hz, dtype=float)
        self.psd = np.asarray(self.psd, dtype=float)
        if self.freq_hz.ndim != 1 or self.freq_hz.shape != self.psd.shape:
            raise ValueError("frequency and PSD arrays must be 1-D and equal length")
        if self.freq_hz.size < 8:
            raise ValueError("a spectrum needs at least 8 bins")
        if not (np.all(np.isfinite(self.freq_hz)) and np.all(np.isfinite(self.psd))):
            raise ValueError("spectrum contains non-finite values")
        if np.any(np.diff(self.freq_hz) <= 0):
            raise ValueError("spectrum frequencies must be strictly increasing")

    @property
    def span(self):
        return float(self.freq_hz[-1] - self.freq_hz[0])

    @property
    def bin_width(self):
        return float(np.median(np.diff(self.freq_hz)))


def lorentzian(f, f0, hwhm, area, baseline=0.0):
    f = np.asarray(f, dtype=float)
    return baseline + area * (hwhm / math.pi) / ((f - f0) ** 2 + hwhm ** 2)


def lorentzian_jacobian(f, f0, hwhm, area, baseline=0.0):
    """Partial derivatives of :func:`lorentzian` w.r.t. ``(f0, hwhm, area, baseline)``."""
    f = np.asarray(f, dtype=float)
    u = f - f0
    den = u ** 2 + hwhm ** 2
    d_f0 = area * hwhm / math.pi * 2.0 * u / den ** 2
    d_g = area / math.pi * (u ** 2 - hwhm ** 2) / den ** 2
    d_a = hwhm / math.pi / den
    d_b = np.ones_like(f)
    return np.column_stack([d_f0, d_g, d_a, d_b])


@dataclass
class SidebandPeak:
    center: float  # Hz
    linewidth: AngularRate  # Gamma_eff, rad/s
    area: float  # PSD units * Hz, baseline removed
    area_numeric: float  # trapezoidal cross-check, tail corrected
    baseline: float
    covariance: np.ndarray  # over (f0, hwhm, area, baseline)
    snr: float
    low_confidence: bool
    result: FitResult | None = None
    self_oscillating: bool = False

    @property
    def hwhm_hz(self):
        return self.linewidth.hz / 2.0

    @property
    def sigma_area(self):
        return float(math.sqrt(max(self.covariance[2, 2], 0.0)))

    @property
    def sigma_linewidth(self):
        # d Gamma / d hwhm = 4 pi
        return float(4.0 * math.pi * math.sqrt(max(self.covariance[1, 1], 0.0)))

    @property
    def height(self):
        return self.area / (math.pi * self.hwhm_hz)


def _robust_sigma(x):
    d = np.diff(x)
    return float(1.4826 * np.median(np.abs(d - np.median(d))) / math.sqrt(2.0))


def integrate_peak(spectrum: Spectrum, baseline: str = "fit", min_linewidths: float = 10.0,
                   min_snr: float = 3.0, options: SolverOptions | None = None) -> SidebandPeak:
    """Fit one Lorentzian peak and integrate it.

    Parameters
    ----------
    baseline : {"fit", "edges", "none"}
        ``fit`` floats a flat baseline in the fit; ``edges`` fixes it to the
        median of the outer 10 % of bins on each side; ``none`` fixes it at 0.
    min_linewidths : float
        Required span in units of the fitted full width.
    min_snr : float
        Peak height over residual scatter below which the result is flagged.
    """
    f = spectrum.freq_hz
    y = spectrum.psd
    n_edge = max(len(f) // 10, 2)
    edge_level = float(np.median(np.concatenate([y[:n_edge], y[-n_edge:]])))
    noise = _robust_sigma(y)
    if baseline == "none":
        b_fixed = 0.0
    elif baseline == "edges":
        b_fixed = edge_level
    elif baseline == "fit":
        b_fixed = None
    else:
        raise ValueError(f"unknown baseline policy {baseline!r}")
    b0 = edge_level if b_fixed is None else b_fixed

    # smooth over a few bins before locating the maximum
    k = 5
    smooth = np.convolve(y - b0, np.ones(k) / k, mode="same")
    i0 = int(np.argmax(smooth))
    excess = float(smooth[i0])
    if excess <= 0:
        raise AbsentPeakError("no bin rises above the baseline")
    area0 = float(np.trapezoid(y - b0, f))
    if area0 <= 0:
        area0 = excess * 3.0 * spectrum.bin_width
    g0 = max(area0 / (math.pi * excess), spectrum.bin_width)
    g0 = min(g0, spectrum.span / 4.0)

    f_ref = float(f[i0])

    def unpack(p):
        b = p[3] if b_fixed is None else b_fixed
        return f_ref + p[0], p[1], p[2], b

    def residual(p):
        return lorentzian(f, *unpack(p)) - y

    def jac(p):
        J = lorentzian_jacobian(f, *unpack(p))
        return J if b_fixed is None else J[:, :3]

    x0 = [0.0, g0, area0]
    lower = [f[0] - f_ref, 1e-6 * spectrum.bin_width, 0.0]
    upper = [f[-1] - f_ref, spectrum.span, np.inf]
    typical = [g0, g0, area0]
    names = ["f0_offset", "hwhm", "area"]
    if b_fixed is None:
        scale = max(abs(b0), noise, excess * 1e-3)
        x0.append(b0)
        lower.append(-np.inf)
        upper.append(np.inf)
        typical.append(scale)
        names.append("baseline")
    result = solve(FitProblem(residual, x0, lower, upper, jacobian=jac, names=names,
                              typical=typical), options)
    f0, g, area, b = unpack(result.x)
    if area <= 0 or not result.converged:
        raise AbsentPeakError(f"no peak could be fitted ({result.message})")
    if spectrum.span < min_linewidths * 2.0 * g:
        raise PeakSpanError(
            f"spectrum spans {spectrum.span / (2 * g):.3g} linewidths, needs {min_linewidths:g}")

    cov = np.full((4, 4), np.nan) if result.covariance is None else np.zeros((4, 4))
    if result.covariance is not None:
        m = result.covariance.shape[0]
        cov[:m, :m] = result.covariance
    resid_sigma = float(np.std(result.residuals, ddof=len(result.x)))
    snr = area / (math.pi * g) / resid_sigma if resid_sigma > 0 else math.inf

    # direct integral over the window, corrected for the Lorentzian tails outside it
    inside = (math.atan((f[-1] - f0) / g) - math.atan((f[0] - f0) / g)) / math.pi
    area_num = float(np.trapezoid(y - b, f)) / inside

    return SidebandPeak(
        center=float(f0), linewidth=AngularRate(4.0 * math.pi * g), area=float(area),
        area_numeric=area_num, baseline=float(b), covariance=cov, snr=float(snr),
        low_confidence=bool(snr < min_snr), result=result,
    )
