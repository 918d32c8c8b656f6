import json
import math
import warnings
from dataclasses import replace

import numpy as np
import pytest

from optocal.cavity import CouplingBranch
from optocal.dataset import RunKind
from optocal.optomech import PumpScheme, gamma_eff, kappa_tot, self_oscillation_threshold
from optocal.peaks import Spectrum
from optocal.pipeline import (AmbiguousBranchWarning, CalibrationConfig, RampPoint, RangeError,
                              StageError, UncertaintyBudget, absolute_scale_uncertainty,
                              choose_branch, extract_g0, run_calibration)
from optocal.synth import generate_dataset

TWO_PI = 2 * math.pi


def ramp(replica, t=0.02, blue=(0.05, 0.2, 0.4, 0.6, 0.8), red=(0.05, 0.3, 1.0, 2.0, 4.0),
         noise=0.0, seed=0, const_kappa=None):
    om, tls = replica.optomech, replica.tls
    p_th = self_oscillation_threshold(om, tls, t)
    rng = np.random.default_rng(seed)
    pts = []
    for scheme, fracs in ((PumpScheme.BLUE, blue), (PumpScheme.RED, red)):
        for f in fracs:
            p = f * p_th
            g = float(gamma_eff(scheme, om, tls, t, p))
            sigma = noise * g if noise else 0.01 * g
            k = const_kappa if const_kappa is not None else float(kappa_tot(om, tls, t, p))
            pts.append(RampPoint(scheme, t, p, g + (noise * g * rng.standard_normal() if noise else 0.0),
                                 sigma, k))
    return pts


def g0_of(replica, pts):
    om = replica.optomech
    return extract_g0(pts, om.kappa_ext, om.omega_c, om.omega_m)


class TestExtractG0:
    def test_noiseless_exact(self, replica):
        est = g0_of(replica, ramp(replica))
        assert est.g0 / TWO_PI == pytest.approx(220.0, rel=1e-9)
        assert est.gamma_m[0.02][0] == pytest.approx(replica.optomech.gamma_m_at(0.02), rel=1e-9)
        assert not est.discrepant

    def test_noisy_recovery_within_two_percent(self, replica):
        for seed in range(10):
            est = g0_of(replica, ramp(replica, noise=0.01, seed=seed))
            assert est.g0 / TWO_PI == pytest.approx(220.0, rel=0.02)
            assert abs(est.g0 / TWO_PI - 220.0) < 4 * est.sigma / TWO_PI

    def test_blue_and_red_slopes_agree(self, replica):
        est = g0_of(replica, ramp(replica, noise=0.01, seed=3))
        assert abs(est.g0_blue - est.g0_red) < 3 * math.hypot(est.sigma_blue, est.sigma_red)

    def test_discrepancy_flagged(self, replica):
        pts = ramp(replica)
        # inflate the red slope by 30 %
        gm = replica.optomech.gamma_m_at(0.02)
        pts = [replace(p, gamma_eff=gm + 1.3 * (p.gamma_eff - gm)) if p.scheme is PumpScheme.RED else p
               for p in pts]
        assert g0_of(replica, pts).discrepant

    def test_zero_slope(self, replica):
        pts = [replace(p, gamma_eff=1000.0, sigma=10.0) for p in ramp(replica)]
        est = g0_of(replica, pts)
        assert est.g0 == 0.0 and est.unresolved
        assert math.isinf(est.relative_uncertainty)

    def test_too_few_powers(self, replica):
        with pytest.raises(RangeError):
            g0_of(replica, ramp(replica, blue=(0.1, 0.3, 0.5)))

    def test_per_point_kappa_correction(self, replica):
        # TLS-active ramp: kappa_tot falls with power; a constant-kappa estimator is biased
        om, tls, t = replica.optomech, replica.tls, 0.02
        red = tuple(np.logspace(-3, 0.5, 8))
        pts = ramp(replica, blue=(0.002, 0.01, 0.05, 0.2), red=red)
        k0 = float(kappa_tot(om, tls, t, 1e-18))
        naive = g0_of(replica, [replace(p, kappa_tot=k0) for p in pts])
        exact = g0_of(replica, pts)

        # predicted naive slope: weighted least squares of the exact rates on the constant-kappa regressor
        hw = 1.0545718176461565e-34 * om.omega_c
        c_naive = np.array([4 * om.kappa_ext * p.p_in / (k0 * hw * (om.omega_m ** 2 + k0 ** 2 / 4))
                            for p in pts])
        x = np.array([p.scheme.sign for p in pts]) * c_naive
        y = np.array([p.gamma_eff for p in pts])
        w = 1 / np.array([p.sigma for p in pts])
        A = np.column_stack([np.ones_like(x), x]) * w[:, None]
        slope = np.linalg.lstsq(A, y * w, rcond=None)[0][1]

        assert exact.g0 / TWO_PI == pytest.approx(220.0, rel=1e-9)
        assert naive.g0 == pytest.approx(math.sqrt(slope), rel=1e-9)
        assert abs(naive.g0 / exact.g0 - 1) > 0.02


class TestChooseBranch:
    O, U = CouplingBranch.OVERCOUPLED, CouplingBranch.UNDERCOUPLED

    def test_closest_to_one(self):
        b, amb, why = choose_branch({self.O: 0.62, self.U: 0.97})
        assert b is self.U and not amb and "closest to 1" in why

    def test_log_distance(self):
        # 1.8 is closer to 1 than 0.5 in log
        assert choose_branch({self.O: 1.8, self.U: 0.5})[0] is self.O

    def test_ambiguous_defaults_overcoupled(self):
        b, amb, _ = choose_branch({self.O: 0.97, self.U: 1.02})
        assert b is self.O and amb

    def test_non_finite(self):
        assert choose_branch({self.O: math.nan, self.U: 0.9})[0] is self.U


class TestReplica:
    def test_branch_matches_truth(self, replica_report, replica_dataset):
        assert replica_report.branch.value == replica_dataset.ground_truth["branch"]
        assert not replica_report.branch_ambiguous

    def test_parameters_recovered(self, replica_report):
        ch = replica_report.chosen
        assert ch.g0.g0 / TWO_PI == pytest.approx(220.0, rel=0.02)
        assert ch.kappa_ext.value / TWO_PI == pytest.approx(180e3, rel=0.02)
        assert replica_report.twpa.params.lambda0 == pytest.approx(0.4, abs=0.01)

    def test_four_millikelvin_population(self, replica_report):
        assert replica_report.row(0.004).a_ph == pytest.approx(5.0, rel=0.15)

    def test_uncorrected_ratio_follows_transmission(self, replica_report_uncorrected):
        for row in replica_report_uncorrected.rows:
            assert row.ratio == pytest.approx(row.ratio_uncorrected)
        assert replica_report_uncorrected.row(0.02).ratio == pytest.approx(0.6, abs=0.08)

    def test_self_oscillating_runs_excluded(self, replica_report, replica_dataset):
        flagged = {r.run_id for r in replica_dataset.runs if r.self_oscillating}
        assert flagged
        contributing = replica_report.contributing
        for stage in ("peaks", "g0", "aph"):
            assert not flagged & set(contributing[stage])
        assert flagged <= set(replica_report.excluded)
        assert all(any(rid in n for n in replica_report.notices) for rid in flagged)

    def test_every_value_has_uncertainty(self, replica_report):
        doc = replica_report.to_dict()
        for section in ("cavity_tls", "optomech"):
            for key in doc[section]:
                if key.endswith("_hz") and not key.startswith(("sigma_", "omega_m", "gamma_m")):
                    assert "sigma_" + key in doc[section], key
        for row in doc["aph_over_nph"]:
            assert row["total_95"] > 0
        for run in doc["runs"]:
            if run["included"]:
                assert run["sigma_a_ph"] > 0

    def test_both_candidates_recorded(self, replica_report):
        cands = replica_report.to_dict()["branch"]["candidates"]
        assert set(cands) == {"overcoupled", "undercoupled"}
        assert all("metric_abs_log_ratio" in c and "tls_residual_cost" in c for c in cands.values())

    def test_ground_truth_section(self, replica_report):
        gt = replica_report.to_dict()["ground_truth_comparison"]
        assert gt["branch_true"] == gt["branch_chosen"]

    def test_provenance(self, replica_report):
        prov = replica_report.to_dict()["provenance"]
        assert prov["seed"] == CalibrationConfig().seed and prov["tool_version"]

    def test_written_outputs(self, replica_report, tmp_path):
        replica_report.write(tmp_path)
        doc = json.loads((tmp_path / "report.json").read_text())
        assert doc["format"] == "optocal-report" and doc["version"] == 1
        for name, head in (("kappa_vs_power.csv", "t_k,p_in_w"), ("delta_vs_power.csv", "t_k,power_w"),
                           ("aph_over_nph_vs_T.csv", "t_k,n_ph")):
            text = (tmp_path / name).read_text()
            assert text.startswith(head) and len(text.splitlines()) > 5


class TestDeterminism:
    def test_idempotent(self, replica_dataset, replica_report):
        again = run_calibration(replica_dataset)
        assert again.to_json() == replica_report.to_json()

    def test_threads_do_not_change_output(self, replica_dataset, replica_report):
        threaded = run_calibration(replica_dataset, CalibrationConfig(threads=4))
        a, b = threaded.to_dict(), replica_report.to_dict()
        a["config"].pop("threads"), b["config"].pop("threads")
        assert a == b


class TestExclusions:
    def test_saturated_run_excluded(self, replica_dataset):
        truth = replica_dataset.ground_truth["runs"]
        loudest = max((rid for rid, v in truth.items() if "p_signal_w" in v),
                      key=lambda rid: truth[rid]["p_signal_w"])
        runs = []
        for run in replica_dataset.runs:
            if run.run_id == loudest:
                run = replace(run, data=Spectrum(run.data.freq_hz, run.data.psd * 1e5))
            runs.append(run)
        report = run_calibration(replace(replica_dataset, runs=runs))
        assert "TWPA-saturated" in report.excluded[loudest]
        for stage in ("peaks", "g0", "aph"):
            assert loudest not in report.contributing[stage]

    def test_missing_twpa_scans(self, replica_dataset):
        ds = replace(replica_dataset, runs=[r for r in replica_dataset.runs
                                           if r.kind is not RunKind.TWPA_SCAN])
        with pytest.raises(StageError) as exc:
            run_calibration(ds)
        assert exc.value.stage == "twpa-tls" and "twpa_scan" in exc.value.message
        assert exc.value.partial.to_dict()["failure"]["stage"] == "twpa-tls"
        report = run_calibration(ds, CalibrationConfig(correct_twpa=False))
        assert report.twpa is None and report.rows

    def test_missing_sideband_kind(self, replica_dataset):
        ds = replace(replica_dataset, runs=[r for r in replica_dataset.runs
                                           if r.kind is not RunKind.SIDEBAND_SPECTRUM])
        with pytest.raises(StageError) as exc:
            run_calibration(ds)
        assert exc.value.stage == "ingest" and "sideband_spectrum" in exc.value.message

    def test_single_temperature_refused(self, replica_dataset):
        ds = replace(replica_dataset, runs=[r for r in replica_dataset.runs if float(r.t_cryo) == 0.1])
        with pytest.raises(StageError):
            run_calibration(ds)


class TestUncertainty:
    def test_scale_budget(self):
        s = absolute_scale_uncertainty(UncertaintyBudget(), 4000, 1)
        assert 0.2 <= s.relative_half_width_95 <= 0.45

    def test_zero_budget(self):
        s = absolute_scale_uncertainty(UncertaintyBudget(0, 0, 0, 0), 200, 1)
        assert s.relative_half_width_95 == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("field", ["g0_rel", "kappa_ext_rel", "kappa_tot_rel", "chain_db"])
    def test_each_input_widens(self, field):
        base = absolute_scale_uncertainty(UncertaintyBudget(), 2000, 2).relative_half_width_95
        wider = replace(UncertaintyBudget(), **{field: 2 * getattr(UncertaintyBudget(), field)})
        assert absolute_scale_uncertainty(wider, 2000, 2).relative_half_width_95 > base

    @pytest.mark.slow
    def test_monotone_degradation(self, small_replica):
        cfg = CalibrationConfig(n_monte_carlo=500)
        out = []
        for factor in (0.5, 1.0, 2.0):
            sc = small_replica.with_noise(small_replica.noise.scaled(factor))
            rep = run_calibration(generate_dataset(sc), cfg)
            ch = rep.chosen
            out.append((np.mean([r.stat_95 for r in rep.rows]), rep.reproducibility_95, ch.g0.sigma,
                        ch.kappa_ext.sigma, np.mean([r.total_95 for r in rep.rows])))
        for lo, hi in zip(out, out[1:]):
            assert all(h >= l for l, h in zip(lo, hi)), (lo, hi)


def test_ambiguous_warning_emitted(replica_dataset, monkeypatch):
    import optocal.pipeline as pl

    monkeypatch.setattr(pl, "choose_branch",
                        lambda m, tol, t: (CouplingBranch.OVERCOUPLED, True, "branch ambiguous: test"))
    with pytest.warns(AmbiguousBranchWarning):
        report = pl.run_calibration(replica_dataset, CalibrationConfig(n_monte_carlo=200))
    assert report.branch_ambiguous and report.branch is CouplingBranch.OVERCOUPLED
