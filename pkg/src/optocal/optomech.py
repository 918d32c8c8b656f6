"""Optomechanical damping, sideband gain and the photon-to-phonon conversion.

Rates are angular (rad/s) and powers are on-chip watts. The total cavity
damping entering every expression is evaluated at the operating point
``(T, P_in)`` through the cavity TLS model when one is supplied, otherwise
the static value stored in :class:`CavityParams` is used.

Sign convention::

    blue pump (w_p = w_c + W_m):  Gamma_eff = Gamma_m - Gamma_opt
    red pump  (w_p = w_c - W_m):  Gamma_eff = Gamma_m + Gamma_opt
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from . import constants
from .cavity import CavityParams, CouplingBranch
from .tls import TemperatureTable, TlsLossParams, TwpaTlsParams, kappa_in, twpa_transmission
from .units import AngularRate, ChainCal

DEFAULT_SATURATION_POWER = 1e-16  # W at the TWPA input


class PumpScheme(enum.Enum):
    BLUE = "blue"
    RED = "red"

    @property
    def sign(self):
        """-1 for blue (anti-damping), +1 for red."""
        return -1.0 if self is PumpScheme.BLUE else 1.0


class SelfOscillationError(ArithmeticError):
    """Gain requested past the blue-pump instability."""


class TwpaSaturationError(ValueError):
    """Signal power at the TWPA input above the saturation boundary."""


class MissingCorrectionError(ValueError):
    """TWPA correction requested without a fitted TWPA model."""


@dataclass(frozen=True)
class SelfOscillation:
    """Distinguished state returned instead of a non-positive blue ``Gamma_eff``."""

    gamma_m: float
    gamma_opt: float

    @property
    def margin(self):
        """``Gamma_opt / Gamma_m``; 1 exactly at threshold."""
        return self.gamma_opt / self.gamma_m


@dataclass(frozen=True)
class OptomechParams:
    omega_m: AngularRate
    gamma_m: TemperatureTable  # rad/s per temperature
    g0: AngularRate
    cavity: CavityParams
    branch: CouplingBranch | None = None

    def __post_init__(self):
        object.__setattr__(self, "omega_m", AngularRate(self.omega_m))
        object.__setattr__(self, "g0", AngularRate(self.g0))
        if isinstance(self.gamma_m, (int, float)):
            object.__setattr__(self, "gamma_m", TemperatureTable.constant(float(self.gamma_m)))
        if self.omega_m <= 0:
            raise ValueError("omega_m must be > 0")
        if self.g0 <= 0:
            raise ValueError("g0 must be > 0")
        if self.branch is None:
            object.__setattr__(self, "branch", self.cavity.branch)

    @property
    def kappa_ext(self):
        return self.cavity.kappa_ext

    @property
    def omega_c(self):
        return self.cavity.omega_c

    def gamma_m_at(self, t):
        # a single-entry table stands for a temperature-independent value
        return self.gamma_m(t, extrapolate=len(self.gamma_m.temperatures) == 1)

    def sideband_resolved(self, tls: TlsLossParams | None = None, t=None, p_in=0.0):
        return bool(self.omega_m > kappa_tot(self, tls, t, p_in))


def kappa_tot(params: OptomechParams, tls: TlsLossParams | None, t, p_in):
    """Total cavity damping at ``(t, p_in)``; static when ``tls`` is None."""
    if tls is None:
        out = np.broadcast_to(float(params.cavity.kappa_tot), np.broadcast(t, p_in).shape)
        return float(out) if np.ndim(out) == 0 else np.array(out)
    return params.kappa_ext + kappa_in(tls, t, p_in)


def coupling_factor(params: OptomechParams, k_tot, p_in):
    """``Gamma_opt / g0**2`` for given total damping and on-chip power [s/rad]."""
    p_in = np.asarray(p_in, dtype=float)
    k_tot = np.asarray(k_tot, dtype=float)
    hw = constants.HBAR * params.omega_c
    out = 4.0 * params.kappa_ext * p_in / (k_tot * hw * (params.omega_m ** 2 + 0.25 * k_tot ** 2))
    return float(out) if np.ndim(out) == 0 else out


def gamma_opt(params: OptomechParams, tls: TlsLossParams | None, t, p_in):
    """Optomechanical damping rate, full (non-resolved) denominator."""
    return params.g0 ** 2 * coupling_factor(params, kappa_tot(params, tls, t, p_in), p_in)


def gamma_opt_resolved(params: OptomechParams, tls: TlsLossParams | None, t, p_in):
    """Resolved-sideband limit, dropping ``(kappa_tot / 2)**2`` against ``Omega_m**2``."""
    k = kappa_tot(params, tls, t, p_in)
    out = (4.0 * params.g0 ** 2 * params.kappa_ext * np.asarray(p_in, dtype=float)
           / (k * constants.HBAR * params.omega_c * params.omega_m ** 2))
    return float(out) if np.ndim(out) == 0 else out


def effective_damping(scheme: PumpScheme, gamma_m, g_opt_rate):
    """Signed ``Gamma_m -+ Gamma_opt`` without the self-oscillation check."""
    return gamma_m + scheme.sign * g_opt_rate


def gamma_eff(scheme: PumpScheme, params: OptomechParams, tls: TlsLossParams | None, t, p_in):
    """Effective mechanical damping, or :class:`SelfOscillation` past the blue threshold."""
    gm = float(params.gamma_m_at(t))
    go = float(gamma_opt(params, tls, t, p_in))
    value = effective_damping(scheme, gm, go)
    if value <= 0.0:
        return SelfOscillation(gm, go)
    return AngularRate(value)


def g_opt(scheme: PumpScheme, params: OptomechParams, tls: TlsLossParams | None, t, p_in):
    """Optomechanical gain ``Gamma_m / Gamma_eff``: above 1 for blue, below 1 for red."""
    ge = gamma_eff(scheme, params, tls, t, p_in)
    if isinstance(ge, SelfOscillation):
        raise SelfOscillationError(
            f"blue pump at {float(p_in):.4g} W is past threshold "
            f"(Gamma_opt/Gamma_m = {ge.margin:.3f})")
    return float(params.gamma_m_at(t)) / float(ge)


def conversion_m(params: OptomechParams, tls: TlsLossParams | None, t, p_in):
    """Photon-to-phonon scale ``M`` [1/J]; ``A_0 = A_ph * M * P_in`` in photons/s."""
    k = np.asarray(kappa_tot(params, tls, t, p_in), dtype=float)
    out = (4.0 * params.g0 ** 2 * params.kappa_ext ** 2
           / (constants.HBAR * params.omega_m ** 2 * params.omega_c * k ** 2))
    return float(out) if np.ndim(out) == 0 else out


def bose_einstein(omega_m, t):
    """Thermal phonon occupation ``1 / (exp(hbar Omega_m / k_B T) - 1)``."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("temperature must be > 0")
    x = constants.HBAR * float(omega_m) / (constants.K_B * t)
    out = 1.0 / np.expm1(x)
    return float(out) if np.ndim(out) == 0 else out


def sideband_area(n_ph, scheme: PumpScheme, params: OptomechParams, tls: TlsLossParams | None,
                  t, p_in, asymmetry=False):
    """On-chip sideband area ``A_sdb`` [photons/s] for a phonon population ``n_ph``.

    With ``asymmetry`` the blue sideband carries ``n + 1`` quanta and the red
    one ``n``; by default both carry ``n``.
    """
    n_eff = n_ph + 1.0 if (asymmetry and scheme is PumpScheme.BLUE) else n_ph
    return n_eff * conversion_m(params, tls, t, p_in) * p_in * g_opt(scheme, params, tls, t, p_in)


def self_oscillation_threshold(params: OptomechParams, tls: TlsLossParams | None, t,
                               p_max=1e-6):
    """On-chip blue pump power where ``Gamma_opt = Gamma_m``.

    ``kappa_tot`` falls with power while TLSs saturate, so ``Gamma_opt`` is
    monotone in ``P_in`` and the crossing is unique.
    """
    gm = float(params.gamma_m_at(t))

    def excess(log_p):
        return math.log(float(gamma_opt(params, tls, t, math.exp(log_p))) / gm)

    lo, hi = math.log(1e-24), math.log(p_max)
    if excess(hi) < 0:
        raise ValueError(f"no self-oscillation below {p_max:g} W")
    return math.exp(optimize.brentq(excess, lo, hi, xtol=1e-14, rtol=1e-14))


def signal_power(a_out_photons, chain: ChainCal, omega_c):
    """Sideband power at the TWPA input for an output-referred area in photons/s."""
    a_chip = a_out_photons / chain.detection_gain.linear
    return a_chip * constants.HBAR * float(omega_c)


def phonon_area(a_out, scheme: PumpScheme, t, p_in, params: OptomechParams,
                tls: TlsLossParams | None, twpa: TwpaTlsParams | None, chain: ChainCal,
                correct_twpa=True, saturation_power=DEFAULT_SATURATION_POWER, g_gain=None):
    """Phonon-referred area ``A_ph = A_sdb / (G_opt M P_in delta)``.

    Parameters
    ----------
    a_out : float
        Sideband area at the recording plane, photons/s (power area over
        ``hbar w_c``). The detection gain of ``chain`` de-embeds it to chip.
    g_gain : float, optional
        Measured optomechanical gain; computed from the model when omitted.

    Raises
    ------
    TwpaSaturationError
        The de-embedded signal exceeds ``saturation_power`` at the TWPA input.
    MissingCorrectionError
        ``correct_twpa`` is set but no TWPA model was given.
    """
    p_sig = signal_power(a_out, chain, params.omega_c)
    if p_sig > saturation_power:
        raise TwpaSaturationError(
            f"signal power {p_sig:.3g} W exceeds the TWPA saturation boundary {saturation_power:.3g} W")
    a_sdb = a_out / chain.detection_gain.linear
    if correct_twpa:
        if twpa is None:
            raise MissingCorrectionError("TWPA correction requested but no TWPA model supplied")
        delta = float(twpa_transmission(twpa, t, p_sig))
    else:
        delta = 1.0
    gain = g_opt(scheme, params, tls, t, p_in) if g_gain is None else float(g_gain)
    return a_sdb / (gain * conversion_m(params, tls, t, p_in) * p_in * delta)
