import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import constants as sc

from optocal.synth import gen_kappa_grid
from optocal.tls import (IdentifiabilityError, MattisBardeenRangeWarning, TemperatureRangeError,
                         TemperatureTable, TlsLossParams, TwpaTlsParams, fit_tls_cavity,
                         fit_tls_twpa, kappa_bcs, kappa_in, kappa_tls, tanh_factor,
                         tls_saturation_fraction, twpa_lambda, twpa_transmission,
                         with_extrapolation)

F_C = 5.154e9
TWO_PI = 2 * math.pi


def cavity_params(**kw):
    base = dict(kappa_tls0=TWO_PI * 664e3, p_cav0=TemperatureTable.constant(1e-13),
                kappa_dielec0=TWO_PI * 270e3, alpha=TWO_PI * 1.562e10, t_c=1.2, f_c=F_C,
                extrapolate=True)
    base.update(kw)
    return TlsLossParams(**base)


class TestTemperatureTable:
    table = TemperatureTable((0.01, 0.1, 0.4), (1e-15, 1e-14, 1e-12))

    def test_exact_hits(self):
        for t, v in zip(self.table.temperatures, self.table.values):
            assert self.table(t) == v

    def test_log_linear_midpoint(self):
        assert self.table(0.25) == pytest.approx(math.sqrt(1e-14 * 1e-12), rel=1e-12)

    def test_extrapolation_refused_by_default(self):
        with pytest.raises(TemperatureRangeError):
            self.table(0.5)
        assert self.table(0.5, extrapolate=True) > 1e-12

    @given(st.floats(0.01, 0.4))
    def test_interpolant_between_neighbours(self, t):
        v = self.table(t)
        assert 1e-15 * (1 - 1e-12) <= v <= 1e-12 * (1 + 1e-12)

    def test_validation(self):
        with pytest.raises(ValueError):
            TemperatureTable((0.2, 0.1), (1.0, 2.0))
        with pytest.raises(ValueError):
            TemperatureTable((0.1,), (-1.0,))

    def test_mapping_round_trip(self):
        assert TemperatureTable.from_mapping(self.table.as_dict()) == self.table


class TestForwardModel:
    def test_tanh_limits(self):
        assert tanh_factor(F_C, 1e-4) == pytest.approx(1.0, abs=1e-15)
        x = sc.h * F_C / (2 * sc.k * 30.0)
        assert tanh_factor(F_C, 30.0) == pytest.approx(x, rel=1e-5)

    @given(st.floats(1e-3, 10.0), st.floats(1e-3, 10.0))
    def test_tanh_monotone_in_temperature(self, a, b):
        lo, hi = sorted((a, b))
        assert tanh_factor(F_C, lo) >= tanh_factor(F_C, hi)

    @given(st.floats(1e-20, 1e-6), st.floats(1e-20, 1e-6))
    def test_tls_loss_decreases_with_power(self, a, b):
        p = cavity_params()
        lo, hi = sorted((a, b))
        assert kappa_tls(p, 0.02, lo) >= kappa_tls(p, 0.02, hi)

    def test_saturation_limits(self):
        assert tls_saturation_fraction(1e-13, 0.0) == 1.0
        assert tls_saturation_fraction(1e-13, np.inf) == 0.0
        assert tls_saturation_fraction(1e-13, 1e-13) == pytest.approx(0.5)

    def test_low_power_low_temperature_limit(self):
        p = cavity_params()
        assert kappa_tls(p, 1e-3, 1e-30) == pytest.approx(p.kappa_tls0, rel=1e-12)

    def test_high_temperature_suppression(self):
        # in the classical limit tanh -> h f / 2 k T
        p = cavity_params()
        ratio = kappa_tls(p, 20.0, 1e-30) / kappa_tls(p, 10.0, 1e-30)
        assert ratio == pytest.approx(0.5, rel=1e-4)

    def test_quasiparticle_term(self):
        p = cavity_params()
        t = 0.4
        expect = p.kappa_dielec0 + p.alpha * (1.2 / t) * math.exp(-3.3 * 1.2 / t)
        assert kappa_bcs(p, t) == pytest.approx(expect, rel=1e-12)

    def test_quasiparticle_range_warning(self):
        with pytest.warns(MattisBardeenRangeWarning):
            kappa_bcs(cavity_params(), 0.7)

    def test_replica_low_power_total(self):
        # kappa_ext + kappa_in at 400 mK and low power, about 3.0 MHz
        p = cavity_params()
        total = (TWO_PI * 180e3 + kappa_in(p, 0.4, 1e-20)) / TWO_PI
        assert total == pytest.approx(3.0e6, rel=0.02)

    def test_twpa_limits(self):
        tw = TwpaTlsParams(0.4, 1.0, TemperatureTable.constant(2e-15), F_C, extrapolate=True)
        assert twpa_transmission(tw, 1e-3, 0.0) == pytest.approx(0.6)
        assert twpa_transmission(tw, 1e-3, 1.0) == pytest.approx(1.0, abs=1e-6)
        assert twpa_lambda(tw, 0.02) == pytest.approx(0.4 * tanh_factor(F_C, 0.02))

    @given(st.floats(0.0, 0.99), st.floats(0.1, 5.0), st.floats(1e-3, 1.0), st.floats(1e-22, 1e-8))
    def test_twpa_transmission_bounded(self, lam, beta, t, p):
        tw = TwpaTlsParams(lam, beta, TemperatureTable.constant(2e-15), F_C, extrapolate=True)
        d = twpa_transmission(tw, t, p)
        assert 1.0 - lam - 1e-12 <= d <= 1.0

    def test_refuses_extrapolation(self):
        p = cavity_params(p_cav0=TemperatureTable((0.01, 0.1), (1e-15, 1e-14)), extrapolate=False)
        with pytest.raises(TemperatureRangeError):
            kappa_in(p, 0.3, 1e-15)
        assert kappa_in(with_extrapolation(p), 0.3, 1e-15) > 0


class TestCavityFit:
    temps = (0.02, 0.05, 0.1, 0.2, 0.3, 0.4)
    powers = np.logspace(-17, -10, 12)

    def test_noiseless_exact(self, replica):
        pts = gen_kappa_grid(replica, self.temps, self.powers)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", MattisBardeenRangeWarning)
            fit = fit_tls_cavity(pts, TWO_PI * 180e3, F_C)
        p = fit.params
        assert p.kappa_tls0.hz == pytest.approx(664e3, rel=1e-6)
        assert p.kappa_dielec0.hz == pytest.approx(270e3, rel=1e-6)
        assert p.t_c == pytest.approx(1.2, rel=1e-6)
        for t in self.temps:
            assert p.p_cav0(t) == pytest.approx(replica.tls.p_cav0(t), rel=1e-5)

    def test_low_temperature_only_without_bcs(self, replica):
        pts = gen_kappa_grid(replica, (0.004, 0.01, 0.02), self.powers)
        fit = fit_tls_cavity(pts, TWO_PI * 180e3, F_C, fit_bcs=False)
        assert fit.params.kappa_tls0.hz == pytest.approx(664e3, rel=1e-3)
        assert fit.params.alpha == 0.0

    def test_single_power_is_degenerate(self, replica):
        pts = [(t, 1e-15, k) for (t, _, k) in gen_kappa_grid(replica, (0.02, 0.1), [1e-15])] * 6
        with pytest.raises((IdentifiabilityError, ValueError)):
            fit_tls_cavity(pts, TWO_PI * 180e3, F_C)

    def test_too_few_points_per_slice(self, replica):
        pts = gen_kappa_grid(replica, (0.02, 0.1), self.powers[:3])
        with pytest.raises(ValueError):
            fit_tls_cavity(pts, TWO_PI * 180e3, F_C)


class TestTwpaFit:
    def scan(self, replica, temps, noise=0.0, seed=0):
        rng = np.random.default_rng(seed)
        pts = []
        for t in temps:
            for p in replica.grid.twpa_powers_w:
                d = twpa_transmission(replica.twpa, t, p) + noise * rng.standard_normal()
                pts.append((t, p, d))
        return pts

    def test_noiseless_exact(self, replica):
        fit = fit_tls_twpa(self.scan(replica, (0.004, 0.02, 0.1, 0.3)), F_C)
        assert fit.params.lambda0 == pytest.approx(0.4, rel=1e-8)
        assert fit.params.beta == pytest.approx(1.0, rel=1e-6)

    def test_noisy_sigma(self, replica):
        fit = fit_tls_twpa(self.scan(replica, (0.004, 0.02, 0.1, 0.3), 0.003, 4), F_C)
        assert abs(fit.params.lambda0 - 0.4) < 4 * fit.stderr["lambda0"]
        assert fit.sigma_lambda_at(0.02) <= fit.stderr["lambda0"]
