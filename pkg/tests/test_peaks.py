import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from optocal.fitting import numeric_jacobian
from optocal.optomech import PumpScheme
from optocal.peaks import (AbsentPeakError, PeakSpanError, Spectrum, integrate_peak, lorentzian,
                           lorentzian_jacobian)
from optocal.synth import gen_sideband_peak


def grid(hwhm=5.0, span_lw=40.0, n=801):
    return np.linspace(-span_lw * hwhm, span_lw * hwhm, n)


class TestLorentzian:
    def test_area_integral(self):
        f = np.linspace(-1e5, 1e5, 2_000_001)
        assert np.trapezoid(lorentzian(f, 0.0, 3.0, 2.5), f) == pytest.approx(2.5, rel=1e-4)

    def test_peak_height(self):
        assert lorentzian(0.0, 0.0, 2.0, 1.0) == pytest.approx(1 / (math.pi * 2.0))

    @given(st.floats(-10, 10), st.floats(0.5, 20), st.floats(0.1, 100), st.floats(-1, 1))
    def test_jacobian_matches_numeric(self, f0, g, a, b):
        f = np.linspace(-60, 60, 121)
        p = np.array([f0, g, a, b])
        num = numeric_jacobian(lambda q: lorentzian(f, *q), p, rel_step=1e-7)
        ana = lorentzian_jacobian(f, *p)
        scale = np.max(np.abs(ana), axis=0)
        assert np.all(np.abs(num - ana) <= 1e-5 * scale)


class TestIntegratePeak:
    def test_noiseless_exact(self):
        f = grid()
        peak = integrate_peak(Spectrum(f, lorentzian(f, 1.5, 5.0, 3.0, 0.2)))
        assert peak.center == pytest.approx(1.5, abs=1e-9)
        assert peak.hwhm_hz == pytest.approx(5.0, rel=1e-9)
        assert peak.area == pytest.approx(3.0, rel=1e-9)
        assert peak.linewidth == pytest.approx(4 * math.pi * 5.0, rel=1e-9)
        assert peak.height == pytest.approx(3.0 / (math.pi * 5.0), rel=1e-9)

    @pytest.mark.parametrize("policy", ["fit", "edges"])
    def test_baseline_policies(self, policy):
        f = grid()
        peak = integrate_peak(Spectrum(f, lorentzian(f, 0.0, 5.0, 3.0, 0.2)), baseline=policy)
        assert peak.area == pytest.approx(3.0, rel=0.03)

    def test_no_baseline_policy(self):
        f = grid()
        peak = integrate_peak(Spectrum(f, lorentzian(f, 0.0, 5.0, 3.0)), baseline="none")
        assert peak.area == pytest.approx(3.0, rel=1e-9)
        assert peak.baseline == 0.0

    def test_floor_bias_below_one_percent(self, replica):
        # replica spectra: floor at 3.5 quanta, 1e5 averages
        rng = np.random.default_rng(11)
        ratios = []
        for _ in range(30):
            sp = gen_sideband_peak(replica, 0.02, 1e-12, PumpScheme.RED, rng=rng)
            peak = integrate_peak(sp.spectrum)
            ratios.append(peak.area / sp.truth["area_out_w"])
        assert abs(np.mean(ratios) - 1.0) < 0.01

    def test_fit_and_numeric_areas_agree(self, replica):
        rng = np.random.default_rng(12)
        for scheme in PumpScheme:
            sp = gen_sideband_peak(replica, 0.1, 5e-12, scheme, rng=rng)
            peak = integrate_peak(sp.spectrum)
            assert peak.area_numeric == pytest.approx(peak.area, rel=0.02)

    def test_uncertainty_reported(self, replica):
        sp = gen_sideband_peak(replica, 0.1, 5e-12, PumpScheme.RED, rng=np.random.default_rng(1))
        peak = integrate_peak(sp.spectrum)
        assert 0 < peak.sigma_area < 0.05 * peak.area
        assert peak.sigma_linewidth > 0
        assert abs(peak.area - sp.truth["area_out_w"]) < 5 * peak.sigma_area

    def test_absent_peak(self):
        f = grid()
        y = np.ones(f.size)
        with pytest.raises(AbsentPeakError):
            integrate_peak(Spectrum(f, y), baseline="edges")

    def test_span_too_short(self):
        f = grid(span_lw=3.0)
        with pytest.raises(PeakSpanError):
            integrate_peak(Spectrum(f, lorentzian(f, 0.0, 5.0, 3.0, 0.1)))

    def test_low_snr_flag(self):
        f = grid()
        rng = np.random.default_rng(5)
        y = lorentzian(f, 0.0, 5.0, 0.3, 1.0) + 0.02 * rng.standard_normal(f.size)
        peak = integrate_peak(Spectrum(f, y))
        assert peak.low_confidence and peak.snr < 3

    def test_high_snr_not_flagged(self):
        f = grid()
        rng = np.random.default_rng(5)
        y = lorentzian(f, 0.0, 5.0, 30.0, 1.0) + 0.002 * rng.standard_normal(f.size)
        assert not integrate_peak(Spectrum(f, y)).low_confidence

    def test_unknown_policy(self):
        f = grid()
        with pytest.raises(ValueError):
            integrate_peak(Spectrum(f, lorentzian(f, 0.0, 5.0, 3.0)), baseline="median")

    def test_spectrum_validation(self):
        with pytest.raises(ValueError):
            Spectrum(np.arange(4.0), np.ones(4))
        with pytest.raises(ValueError):
            Spectrum(np.arange(10.0)[::-1], np.ones(10))
