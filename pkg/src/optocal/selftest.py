"""Embedded invariant suite behind ``optocal selftest``.

Each check is a plain function that raises ``AssertionError`` on failure.
Reference values are computed from literal CODATA numbers rather than from
:mod:`optocal.constants`, so a corrupted constant table is detected.
"""

from __future__ import annotations

import contextlib
import math
import time
from dataclasses import dataclass

import numpy as np

from . import constants
from .cavity import CavityParams, ReflectionTrace, fit_reflection, s11_complex, s11_db
from .fitting import FitProblem, monte_carlo_propagate, relative_normal, numeric_jacobian, solve
from .optomech import (OptomechParams, PumpScheme, bose_einstein, gamma_eff, phonon_area,
                       self_oscillation_threshold, SelfOscillation, sideband_area)
from .peaks import Spectrum, integrate_peak, lorentzian, lorentzian_jacobian
from .tls import TemperatureTable, TlsLossParams, TwpaTlsParams, kappa_tls, tanh_factor, twpa_transmission
from .units import ChainCal, Power, apply_chain, dbm_to_watts, watts_to_dbm

# literal references, independent of the constants module
_H = 6.62607015e-34
_K_B = 1.380649e-23
_HBAR = _H / (2.0 * math.pi)

_F_C = 5.154e9
_CAV = CavityParams.from_hz(_F_C, 180e3, 2.8e6)
_OM = OptomechParams(2 * math.pi * 15.13e6, 2 * math.pi * 840.0, 2 * math.pi * 220.0, _CAV)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0


def check_tanh_limits():
    low = tanh_factor(_F_C, 1e-4)
    assert abs(low - 1.0) < 1e-12, f"tanh factor at 0.1 mK is {low}, expected 1"
    t = 50.0
    x = _H * _F_C / (2 * _K_B * t)
    got = tanh_factor(_F_C, t)
    assert abs(got / math.tanh(x) - 1.0) < 1e-9, f"high-T tanh factor {got:.9e} != {math.tanh(x):.9e}"
    assert abs(got / x - 1.0) < 1e-5, "high-T limit h f / 2 k T not reached"


def check_bose_einstein():
    n = bose_einstein(2 * math.pi * 15.13e6, 0.004)
    ref = 1.0 / math.expm1(_HBAR * 2 * math.pi * 15.13e6 / (_K_B * 0.004))
    assert abs(n / ref - 1.0) < 1e-9, f"n(4 mK) = {n}, reference {ref}"
    hi = bose_einstein(2 * math.pi * 15.13e6, 10.0)
    classical = _K_B * 10.0 / (_HBAR * 2 * math.pi * 15.13e6)
    assert abs(hi / classical - 1.0) < 1e-3, "classical limit not reached"


def check_swap_symmetry():
    f = np.linspace(_F_C - 5e6, _F_C + 5e6, 301)
    a = s11_db(_CAV, f)
    b = s11_db(_CAV.swapped(), f)
    assert np.max(np.abs(a - b)) < 1e-9, "|S11| changes under kappa_ext <-> kappa_in"


def check_reflection_limits():
    s_far = s11_complex(_CAV, np.array([_F_C + 1e12]))
    assert abs(abs(s_far[0]) - 1.0) < 1e-6, "|S11| must tend to 1 far from resonance"
    crit = CavityParams(_F_C, 2 * math.pi * 1e6, 2 * math.pi * 1e6)
    assert abs(s11_complex(crit, np.array([_F_C]))[0]) < 1e-12, "critical coupling must null S11"


def check_reflection_round_trip():
    f = np.linspace(_F_C - 20e6, _F_C + 20e6, 401)
    trace = ReflectionTrace(f, s11_db(_CAV, f))
    fit = fit_reflection(trace)
    k_ext = sorted(p.kappa_ext.hz for p in fit.pair)
    assert abs(k_ext[0] / 180e3 - 1.0) < 1e-4, f"kappa_ext candidates {k_ext}"
    assert abs(fit.kappa_tot.hz / 2.98e6 - 1.0) < 1e-6


def check_tls_limits():
    p = TlsLossParams(2 * math.pi * 664e3, TemperatureTable.constant(1e-13), 2 * math.pi * 270e3,
                      0.0, 1.2, _F_C, extrapolate=True)
    assert abs(kappa_tls(p, 1e-3, 0.0) / p.kappa_tls0 - 1.0) < 1e-9
    assert kappa_tls(p, 1e-3, np.inf) == 0.0
    tw = TwpaTlsParams(0.4, 1.0, TemperatureTable.constant(2e-15), _F_C, extrapolate=True)
    assert abs(twpa_transmission(tw, 1e-3, 0.0) - 0.6) < 1e-9
    assert abs(twpa_transmission(tw, 1e-3, 1e-3) - 1.0) < 1e-6


def check_units_round_trip():
    for dbm in (-150.0, -70.0, 0.0, 13.0):
        assert abs(watts_to_dbm(dbm_to_watts(dbm)) - dbm) < 1e-12
    chain = ChainCal(70.0, 85.0)
    p = Power(1e-12)
    back = apply_chain(apply_chain(p, chain, "inject"), chain, "source")
    assert abs(back / p - 1.0) < 1e-12


def check_linear_lm():
    rng = np.random.default_rng(3)
    A = rng.normal(size=(50, 4))
    y = A @ np.array([1.0, -2.0, 0.5, 3.0]) + 0.01 * rng.normal(size=50)
    res = solve(FitProblem(lambda x: A @ x - y, np.zeros(4), jacobian=lambda x: A))
    ref = np.linalg.lstsq(A, y, rcond=None)[0]
    assert np.max(np.abs(res.x - ref)) < 1e-10, "LM misses the normal-equation solution"


def check_lorentzian_jacobian():
    f = np.linspace(-50.0, 50.0, 201)
    p = np.array([1.5, 4.0, 7.0, 0.3])
    num = numeric_jacobian(lambda q: lorentzian(f, *q), p, rel_step=1e-7)
    ana = lorentzian_jacobian(f, *p)
    scale = np.max(np.abs(ana), axis=0)
    assert np.max(np.abs(num - ana) / scale) < 1e-5


def check_peak_area():
    f = np.linspace(-400.0, 400.0, 1601)
    spec = Spectrum(f, lorentzian(f, 3.0, 5.0, 2.0, 0.1))
    peak = integrate_peak(spec)
    assert abs(peak.area / 2.0 - 1.0) < 1e-8
    assert abs(peak.area_numeric / peak.area - 1.0) < 0.02


def check_self_oscillation():
    p_th = self_oscillation_threshold(_OM, None, 0.02)
    ge = gamma_eff(PumpScheme.BLUE, _OM, None, 0.02, p_th)
    assert isinstance(ge, SelfOscillation) or ge < 1e-6 * _OM.gamma_m_at(0.02)
    assert gamma_eff(PumpScheme.RED, _OM, None, 0.02, p_th) > 0


def check_phonon_round_trip():
    chain = ChainCal(70.0, 85.0)
    for scheme in PumpScheme:
        a_chip = sideband_area(5.0, scheme, _OM, None, 0.004, 1e-12)
        a_out = a_chip * chain.detection_gain.linear
        back = phonon_area(a_out, scheme, 0.004, 1e-12, _OM, None, None, chain, correct_twpa=False)
        assert abs(back / 5.0 - 1.0) < 1e-12, f"{scheme.value}: {back}"


def check_monte_carlo_determinism():
    inputs = {"a": relative_normal(1.0, 0.05)}
    s1 = monte_carlo_propagate(lambda a: a ** 2, inputs, 500, 11, vectorized=True)
    s2 = monte_carlo_propagate(lambda a: a ** 2, inputs, 500, 11, vectorized=True)
    assert np.array_equal(s1.samples, s2.samples)


CHECKS = (
    check_tanh_limits, check_bose_einstein, check_swap_symmetry, check_reflection_limits,
    check_reflection_round_trip, check_tls_limits, check_units_round_trip, check_linear_lm,
    check_lorentzian_jacobian, check_peak_area, check_self_oscillation, check_phonon_round_trip,
    check_monte_carlo_determinism,
)


@contextlib.contextmanager
def patched_constants(overrides):
    """Temporarily replace entries of :mod:`optocal.constants` (test hook)."""
    saved = {k: getattr(constants, k) for k in overrides}
    try:
        for k, v in overrides.items():
            setattr(constants, k, v)
        yield
    finally:
        for k, v in saved.items():
            setattr(constants, k, v)


def run_selftest(overrides=None):
    """Run every check; returns a list of :class:`CheckResult` in a fixed order."""
    results = []
    with patched_constants(overrides or {}):
        for check in CHECKS:
            name = check.__name__.removeprefix("check_")
            t0 = time.perf_counter()
            try:
                check()
            except Exception as exc:  # any failure is reported, not raised
                results.append(CheckResult(name, False, f"{type(exc).__name__}: {exc}",
                                           time.perf_counter() - t0))
            else:
                results.append(CheckResult(name, True, "", time.perf_counter() - t0))
    return results
