"""Calibration of sideband spectra in phonon units for a microwave optomechanical device."""

__version__ = "0.1.0"
