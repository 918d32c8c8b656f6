"""Unit-tagged scalars and the injection/detection chain.

Each quantity is a ``float`` subclass holding its value in one canonical unit
(Hz, rad/s, W, K, power-dB). They behave as plain floats inside numpy
expressions, so model code stays vectorised; the tag exists so that a dBm
number can only become a ``Power`` through :meth:`Power.from_dbm`.

Arithmetic on tagged values returns plain ``float``: a product of a
``Frequency`` and anything is no longer a frequency.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import constants


class UnitError(ValueError):
    """Invalid value for a unit-carrying quantity."""


def _finite(value, what):
    value = float(value)
    if not math.isfinite(value):
        raise UnitError(f"{what} must be finite, got {value!r}")
    return value


class Frequency(float):
    """Cyclic frequency in Hz."""

    def __new__(cls, hz):
        return super().__new__(cls, _finite(hz, "frequency"))

    @property
    def angular(self) -> AngularRate:
        return AngularRate(constants.TWO_PI * float(self))

    def __repr__(self):
        return f"Frequency({float(self)!r} Hz)"


class AngularRate(float):
    """Angular rate in rad/s (resonances, damping rates, couplings)."""

    def __new__(cls, rad_per_s):
        return super().__new__(cls, _finite(rad_per_s, "angular rate"))

    @classmethod
    def from_hz(cls, hz) -> AngularRate:
        return cls(constants.TWO_PI * float(hz))

    @property
    def frequency(self) -> Frequency:
        return Frequency(float(self) / constants.TWO_PI)

    @property
    def hz(self) -> float:
        return float(self) / constants.TWO_PI

    def __repr__(self):
        return f"AngularRate(2pi*{self.hz!r} Hz)"


class Power(float):
    """Power in watts."""

    def __new__(cls, watts):
        watts = _finite(watts, "power")
        if watts < 0:
            raise UnitError(f"power must be >= 0 W, got {watts!r}")
        return super().__new__(cls, watts)

    @classmethod
    def from_dbm(cls, dbm) -> Power:
        return cls(dbm_to_watts(dbm))

    @property
    def dbm(self) -> float:
        return watts_to_dbm(float(self))

    def __repr__(self):
        return f"Power({float(self)!r} W)"


class Temperature(float):
    """Temperature in kelvin; strictly positive."""

    def __new__(cls, kelvin):
        kelvin = _finite(kelvin, "temperature")
        if kelvin <= 0:
            raise UnitError(f"temperature must be > 0 K, got {kelvin!r}")
        return super().__new__(cls, kelvin)

    def __repr__(self):
        return f"Temperature({float(self)!r} K)"


class Gain(float):
    """Power gain in dB (10*log10). Negative values are losses."""

    def __new__(cls, db):
        return super().__new__(cls, _finite(db, "gain"))

    @classmethod
    def from_linear(cls, factor) -> Gain:
        factor = _finite(factor, "linear gain")
        if factor <= 0:
            raise UnitError(f"linear gain must be > 0, got {factor!r}")
        return cls(10.0 * math.log10(factor))

    @property
    def linear(self) -> float:
        return 10.0 ** (float(self) / 10.0)

    def __repr__(self):
        return f"Gain({float(self)!r} dB)"


def dbm_to_watts(p_dbm) -> Power:
    p_dbm = _finite(p_dbm, "dBm value")
    return Power(1e-3 * 10.0 ** (p_dbm / 10.0))


def watts_to_dbm(p_watts) -> float:
    p_watts = _finite(p_watts, "power")
    if p_watts <= 0:
        raise UnitError(f"cannot express {p_watts!r} W in dBm")
    return 10.0 * math.log10(p_watts / 1e-3)


@dataclass(frozen=True)
class ChainCal:
    """Calibrated microwave chain.

    ``injection_attenuation`` is the net loss from the generator to the chip;
    ``detection_gain`` the net gain from the chip (TWPA input plane) to the
    recorded output, defined with the TWPA TLS loss saturated.
    ``twpa_injection_attenuation`` maps generator power to the TWPA input for
    probe scans referenced at the generator.
    """

    injection_attenuation: Gain
    detection_gain: Gain
    twpa_gain: Gain = Gain(18.0)
    twpa_injection_attenuation: Gain | None = None

    def __post_init__(self):
        for name in ("injection_attenuation", "detection_gain", "twpa_gain"):
            object.__setattr__(self, name, Gain(getattr(self, name)))
        if self.twpa_injection_attenuation is not None:
            object.__setattr__(self, "twpa_injection_attenuation",
                               Gain(self.twpa_injection_attenuation))


def apply_chain(power, chain: ChainCal, direction: str = "inject"):
    """Move a power across the chain.

    ``inject``: generator -> chip (divide by the injection attenuation).
    ``detect``: chip -> output (multiply by the detection gain).
    ``deembed``: output -> chip, the inverse of ``detect``.
    ``source``: chip -> generator, the inverse of ``inject``.

    Accepts scalars or arrays in watts (or PSDs in W/Hz, which scale the same).
    """
    att = chain.injection_attenuation.linear
    gain = chain.detection_gain.linear
    factors = {"inject": 1.0 / att, "detect": gain, "deembed": 1.0 / gain, "source": att}
    if direction not in factors:
        raise ValueError(f"unknown chain direction {direction!r}")
    out = np.asarray(power, dtype=float) * factors[direction]
    return Power(out) if out.ndim == 0 else out
