"""End-to-end calibration: raw runs to phonon-referred sideband areas.

Stages, in fixed order:

1. ``sweeps``      fit every reflection sweep (both coupling candidates)
2. ``coupling``    per coupling hypothesis, a single ``kappa_ext`` for the device
3. ``cavity-tls``  joint TLS fit of ``kappa_tot(T, P_in)`` per hypothesis
4. ``twpa-tls``    joint fit of pump-off TWPA transmission scans
5. ``peaks``       Lorentzian fit of every sideband spectrum, with exclusions
6. ``g0``          ``g0`` and ``Gamma_m(T)`` from the damping ramps, per hypothesis
7. ``aph``         ``A_ph`` per run, per hypothesis
8. ``branch``      keep the hypothesis whose high-temperature ``A_ph/n_ph`` is closest to 1
9. ``uncertainty`` Monte-Carlo propagation of the absolute scale

A stage failure raises :class:`StageError` carrying a partial report.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, constants
from .cavity import CavityParams, CouplingBranch, ReflectionFit, fit_reflection
from .dataset import Dataset, RunKind, RunRecord, ingest
from .fitting import FitError, db_normal, monte_carlo_propagate, relative_normal
from .optomech import (DEFAULT_SATURATION_POWER, MissingCorrectionError, OptomechParams,
                       PumpScheme, SelfOscillationError, TwpaSaturationError, bose_einstein,
                       conversion_m, g_opt, phonon_area, signal_power)
from .peaks import AbsentPeakError, PeakSpanError, SidebandPeak, integrate_peak
from .tls import (IdentifiabilityError, TemperatureTable, TlsCavityFit, TwpaTlsFit,
                  fit_tls_cavity, fit_tls_twpa, kappa_in, twpa_transmission, with_extrapolation)
from .units import AngularRate, apply_chain

REPORT_FORMAT = "optocal-report"
REPORT_VERSION = 1
DEFAULT_SEED = 1729

log = logging.getLogger(__name__)

__all__ = [
    "CalibrationConfig", "UncertaintyBudget", "CalibrationReport", "StageError",
    "AmbiguousBranchWarning", "RangeError", "RampPoint", "G0Estimate", "extract_g0",
    "choose_branch", "integrate_peak", "ingest", "run_calibration",
    "absolute_scale_uncertainty", "calibrate_path",
]


class StageError(RuntimeError):
    def __init__(self, stage, message, partial=None):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage
        self.message = message
        self.partial = partial


class AmbiguousBranchWarning(UserWarning):
    pass


class RangeError(ValueError):
    """Too few usable points for a ramp fit."""


@dataclass(frozen=True)
class UncertaintyBudget:
    """Relative 95 % half-widths of the scale inputs; the chain term is in dB."""

    g0_rel: float = 0.05
    kappa_ext_rel: float = 0.05
    kappa_tot_rel: float = 0.05
    chain_db: float = 1.0


@dataclass
class CalibrationConfig:
    correct_twpa: bool = True
    seed: int = DEFAULT_SEED
    n_monte_carlo: int = 2000
    threads: int = 1
    saturation_power: float = DEFAULT_SATURATION_POWER  # W at the TWPA input
    branch_t_min: float = 0.1  # K, lower end of the branch-metric window
    ambiguity_tolerance: float = 0.10
    kappa_ext_tolerance: float = 0.05  # relative match of per-sweep candidates
    extrapolate: bool = False
    min_snr: float = 3.0
    asymmetry: bool = False  # blue areas carry n + 1; subtract the quantum before n_ph
    budget: UncertaintyBudget = field(default_factory=UncertaintyBudget)


# ------------------------------------------------------------------ helpers

def _pmap(fn, items, threads):
    items = list(items)
    if threads and threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _clean(obj):
    """JSON-safe copy: non-finite floats become None, numpy scalars become Python."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


# ----------------------------------------------------------- stage: sweeps

@dataclass
class SweepFit:
    run_id: str
    t: float
    p_in: float
    fit: ReflectionFit


def fit_sweeps(dataset: Dataset, config: CalibrationConfig, notices):
    runs = dataset.by_kind(RunKind.REFLECTION_SWEEP)

    def one(run):
        p_in = float(apply_chain(run.p_generator, dataset.chain, "inject"))
        try:
            return SweepFit(run.run_id, float(run.t_cryo), p_in, fit_reflection(run.data))
        except (FitError, ValueError) as exc:
            return f"sweep {run.run_id} skipped: {exc}"

    out = []
    for item in _pmap(one, runs, config.threads):
        if isinstance(item, str):
            notices.append(item)
        else:
            out.append(item)
    return out


# --------------------------------------------------------- stage: coupling

@dataclass
class KappaExtEstimate:
    branch: CouplingBranch
    value: float  # rad/s
    sigma: float
    reference_run: str
    run_ids: list
    consistency: float  # fraction of sweeps offering a matching candidate


def kappa_ext_candidates(sweeps, tolerance=0.05):
    """One ``kappa_ext`` per coupling hypothesis.

    The hypotheses are the two candidates of the lowest-loss sweep. Each is
    refined by the inverse-variance mean of the matching candidates of all
    other sweeps.
    """
    ref = min(sweeps, key=lambda s: float(s.fit.kappa_tot))
    out = {}
    for branch in CouplingBranch:
        k_ref = float(ref.fit.params(branch).kappa_ext)
        vals, wts, ids = [], [], []
        for s in sweeps:
            cands = [(abs(float(s.fit.params(b).kappa_ext) - k_ref), b) for b in CouplingBranch]
            _, b = min(cands, key=lambda c: c[0])
            k = float(s.fit.params(b).kappa_ext)
            if abs(k - k_ref) > tolerance * k_ref:
                continue
            var = float(s.fit.covariance(b)[1, 1])
            vals.append(k)
            wts.append(1.0 / var if var > 0 and math.isfinite(var) else 0.0)
            ids.append(s.run_id)
        vals, wts = np.array(vals), np.array(wts)
        if wts.sum() > 0:
            value = float(np.sum(wts * vals) / wts.sum())
            sigma = float(1.0 / math.sqrt(wts.sum()))
        else:
            value, sigma = float(np.mean(vals)), float(np.std(vals))
        out[branch] = KappaExtEstimate(branch, value, sigma, ref.run_id, ids,
                                       len(ids) / len(sweeps))
    return out


# ------------------------------------------------------------- stage: twpa

def twpa_points(dataset: Dataset, pump_on=False):
    pts = []
    ids = []
    for run in dataset.by_kind(RunKind.TWPA_SCAN):
        if run.twpa_pump != pump_on:
            continue
        p = run.data.power_w
        if dataset.twpa_scan_reference == "generator":
            p = p / dataset.chain.twpa_injection_attenuation.linear
        pts.extend((float(run.t_cryo), float(pi), float(d)) for pi, d in zip(p, run.data.transmission))
        ids.append(run.run_id)
    return pts, ids


def saturation_boundary(off_points, on_points, threshold=0.05):
    """Lowest power where the pump-on/pump-off ratio falls ``threshold`` below its low-power level."""
    if not on_points:
        return None
    on = np.array(on_points)
    off = np.array(off_points)
    best = None
    for t in np.unique(on[:, 0]):
        a = on[on[:, 0] == t]
        b = off[off[:, 0] == t] if off.size else off
        if b.size == 0:
            continue
        a = a[np.argsort(a[:, 1])]
        b = b[np.argsort(b[:, 1])]
        ref = np.interp(np.log(a[:, 1]), np.log(b[:, 1]), b[:, 2])
        ratio = a[:, 2] / ref
        level = float(np.median(ratio[: max(3, len(ratio) // 4)]))
        below = np.nonzero(ratio < level * (1.0 - threshold))[0]
        if below.size:
            p = float(a[below[0], 1])
            best = p if best is None else min(best, p)
    return best


# ------------------------------------------------------------ stage: peaks

@dataclass
class PeakRecord:
    run: RunRecord
    p_in: float
    peak: SidebandPeak | None
    a_out: float  # photons/s at the recording plane
    p_signal: float  # W at the TWPA input
    included: bool
    reason: str = ""


def fit_peaks(dataset: Dataset, f_c, config: CalibrationConfig):
    hw = constants.HBAR * constants.TWO_PI * f_c

    def one(run):
        p_in = float(apply_chain(run.p_generator, dataset.chain, "inject"))
        if run.self_oscillating:
            return PeakRecord(run, p_in, None, math.nan, math.nan, False,
                              "self-oscillating (flagged in manifest)")
        try:
            peak = integrate_peak(run.data, min_snr=config.min_snr)
        except (AbsentPeakError, PeakSpanError, FitError) as exc:
            return PeakRecord(run, p_in, None, math.nan, math.nan, False, f"peak fit failed: {exc}")
        if peak.linewidth.hz < 2.0 * run.data.bin_width:
            return PeakRecord(run, p_in, peak, math.nan, math.nan, False,
                              "self-oscillating (unresolved line)")
        a_out = peak.area / hw
        p_sig = float(signal_power(a_out, dataset.chain, constants.TWO_PI * f_c))
        if p_sig > config.saturation_power:
            return PeakRecord(run, p_in, peak, a_out, p_sig, False,
                              f"TWPA-saturated: signal {p_sig:.3g} W above {config.saturation_power:.3g} W")
        return PeakRecord(run, p_in, peak, a_out, p_sig, True)

    return _pmap(one, dataset.by_kind(RunKind.SIDEBAND_SPECTRUM), config.threads)


# --------------------------------------------------------------- stage: g0

@dataclass
class RampPoint:
    scheme: PumpScheme
    t: float
    p_in: float
    gamma_eff: float  # rad/s
    sigma: float
    kappa_tot: float  # rad/s at (t, p_in)
    run_id: str = ""


@dataclass
class G0Estimate:
    g0: float  # rad/s
    sigma: float
    g0_blue: float | None
    sigma_blue: float | None
    g0_red: float | None
    sigma_red: float | None
    discrepancy_sigma: float | None
    discrepant: bool
    unresolved: bool
    gamma_m: dict  # T -> (value, sigma), rad/s
    run_ids: list
    slopes: dict

    @property
    def relative_uncertainty(self):
        return math.inf if self.g0 == 0 else self.sigma / self.g0

    def gamma_m_table(self):
        ts = sorted(self.gamma_m)
        vals = [max(self.gamma_m[t][0], 1e-12) for t in ts]
        return TemperatureTable(tuple(ts), tuple(vals))


def _weighted_lstsq(A, y, w):
    Aw = A * w[:, None]
    yw = y * w
    x, *_ = np.linalg.lstsq(Aw, yw, rcond=None)
    r = Aw @ x - yw
    dof = len(y) - A.shape[1]
    cov = np.linalg.pinv(Aw.T @ Aw)
    if dof > 0:
        cov = cov * float(r @ r) / dof
    return x, cov


def extract_g0(points, kappa_ext, omega_c, omega_m, min_powers=4) -> G0Estimate:
    """``g0`` from the linear dependence of ``Gamma_eff`` on pump power.

    Each point contributes ``Gamma_eff = Gamma_m(T) -+ g0**2 c_i`` with the
    per-point factor ``c_i = Gamma_opt / g0**2`` evaluated at its own
    ``kappa_tot``. Intercepts are shared between schemes at equal
    temperature. Slopes are fitted per scheme and jointly; the joint slope
    gives ``g0``.
    """
    points = list(points)
    schemes = sorted({p.scheme for p in points}, key=lambda s: s.value)
    if not schemes:
        raise RangeError("no ramp points")
    for s in schemes:
        n = len({p.p_in for p in points if p.scheme is s})
        if n < min_powers:
            raise RangeError(f"{s.value} ramp has {n} sub-threshold powers, needs >= {min_powers}")
    temps = sorted({p.t for p in points})
    ti = {t: i for i, t in enumerate(temps)}
    nt = len(temps)
    hw = constants.HBAR * float(omega_c)
    y = np.array([p.gamma_eff for p in points])
    sig = np.array([p.sigma if p.sigma > 0 else 1.0 for p in points])
    k = np.array([p.kappa_tot for p in points])
    pin = np.array([p.p_in for p in points])
    c = 4.0 * float(kappa_ext) * pin / (k * hw * (float(omega_m) ** 2 + 0.25 * k ** 2))
    sign = np.array([p.scheme.sign for p in points])
    onehot = np.zeros((len(points), nt))
    for i, p in enumerate(points):
        onehot[i, ti[p.t]] = 1.0
    w = 1.0 / sig

    # per-scheme slopes
    cols = [onehot] + [((np.array([p.scheme is s for p in points])) * sign * c)[:, None]
                       for s in schemes]
    x_sep, cov_sep = _weighted_lstsq(np.hstack(cols), y, w)
    per = {}
    for j, s in enumerate(schemes):
        slope, var = x_sep[nt + j], cov_sep[nt + j, nt + j]
        per[s] = (slope, math.sqrt(max(var, 0.0)))

    # joint slope
    x, cov = _weighted_lstsq(np.hstack([onehot, (sign * c)[:, None]]), y, w)
    slope, s_slope = x[nt], math.sqrt(max(cov[nt, nt], 0.0))

    # a slope whose total effect is below rounding of the rates counts as zero
    floor = 1e-9 * float(np.max(np.abs(y))) / float(np.max(c))

    def to_g0(s, ss):
        if s <= floor:
            return 0.0, math.inf
        g = math.sqrt(s)
        return g, ss / (2.0 * g)

    g0, sg0 = to_g0(slope, s_slope)
    gb = to_g0(*per[PumpScheme.BLUE]) if PumpScheme.BLUE in per else (None, None)
    gr = to_g0(*per[PumpScheme.RED]) if PumpScheme.RED in per else (None, None)
    disc = None
    if len(per) == 2:
        (sb, eb), (sr, er) = per[PumpScheme.BLUE], per[PumpScheme.RED]
        den = math.hypot(eb, er)
        disc = abs(sb - sr) / den if den > 0 else (0.0 if sb == sr else math.inf)
    gamma_m = {t: (float(x[ti[t]]), math.sqrt(max(cov[ti[t], ti[t]], 0.0))) for t in temps}
    return G0Estimate(
        g0=g0, sigma=sg0, g0_blue=gb[0], sigma_blue=gb[1], g0_red=gr[0], sigma_red=gr[1],
        discrepancy_sigma=disc, discrepant=bool(disc is not None and disc > 2.0),
        unresolved=g0 == 0.0, gamma_m=gamma_m, run_ids=[p.run_id for p in points],
        slopes={s.value: per[s] for s in schemes} | {"joint": (slope, s_slope)},
    )


# -------------------------------------------------------------- stage: aph

@dataclass
class RunResult:
    run_id: str
    t: float
    scheme: str
    p_in: float
    included: bool
    reason: str = ""
    gamma_eff: float = math.nan
    sigma_gamma_eff: float = math.nan
    area_out: float = math.nan  # photons/s, recording plane
    sigma_area_out: float = math.nan
    p_signal: float = math.nan
    delta: float = math.nan
    g_opt: float = math.nan
    conversion_m: float = math.nan
    n_ph: float = math.nan
    a_ph: float = math.nan  # primary (per config)
    sigma_a_ph: float = math.nan  # statistical, 1 sigma
    a_ph_corrected: float = math.nan
    a_ph_uncorrected: float = math.nan
    ratio: float = math.nan
    ratio_uncorrected: float = math.nan


@dataclass
class BranchAnalysis:
    branch: CouplingBranch
    kappa_ext: KappaExtEstimate
    tls: TlsCavityFit | None = None
    g0: G0Estimate | None = None
    optomech: OptomechParams | None = None
    runs: list = field(default_factory=list)
    error: str | None = None

    def ratios(self, t_min=0.0):
        return np.array([r.ratio for r in self.runs if r.included and r.t >= t_min
                         and math.isfinite(r.ratio)])

    def metric(self, t_min):
        r = self.ratios(t_min)
        if self.error or r.size == 0:
            return math.nan, math.inf
        med = float(np.median(r))
        return med, abs(math.log(med)) if med > 0 else math.inf


def analyse_branch(branch, kext: KappaExtEstimate, sweeps, peaks, twpa: TwpaTlsFit | None,
                   dataset: Dataset, f_c, config: CalibrationConfig) -> BranchAnalysis:
    out = BranchAnalysis(branch, kext)
    pts = [(s.t, s.p_in, float(s.fit.kappa_tot)) for s in sweeps]
    fit_bcs = max(p[0] for p in pts) >= 0.25
    try:
        out.tls = fit_tls_cavity(pts, kext.value, f_c, fit_bcs=fit_bcs)
    except (IdentifiabilityError, FitError, ValueError) as exc:
        out.error = f"cavity TLS fit failed: {exc}"
        return out
    tls = with_extrapolation(out.tls.params, config.extrapolate)
    omega_c = constants.TWO_PI * f_c
    omega_m = AngularRate.from_hz(dataset.omega_m_hz)

    ramp = []
    for rec in peaks:
        if not rec.included:
            continue
        k = float(kext.value + kappa_in(tls, float(rec.run.t_cryo), rec.p_in))
        ramp.append(RampPoint(rec.run.scheme, float(rec.run.t_cryo), rec.p_in,
                              float(rec.peak.linewidth), rec.peak.sigma_linewidth, k, rec.run.run_id))
    try:
        out.g0 = extract_g0(ramp, kext.value, omega_c, omega_m)
    except RangeError as exc:
        out.error = f"g0 extraction failed: {exc}"
        return out
    if out.g0.unresolved:
        out.error = "g0 unresolved (non-positive slope)"
        return out
    k_ref = float(out.tls.kappa_tot(min(out.tls.temperatures), 1.0))
    cav = CavityParams(f_c, kext.value, max(k_ref - kext.value, 0.0))
    om = OptomechParams(omega_m, out.g0.gamma_m_table(), out.g0.g0, cav, branch)
    out.optomech = om

    for rec in peaks:
        run = rec.run
        t = float(run.t_cryo)
        res = RunResult(run.run_id, t, run.scheme.value, rec.p_in, rec.included, rec.reason)
        out.runs.append(res)
        if rec.peak is not None:
            res.gamma_eff = float(rec.peak.linewidth)
            res.sigma_gamma_eff = rec.peak.sigma_linewidth
        if not rec.included:
            continue
        hw = constants.HBAR * omega_c
        res.area_out = rec.a_out
        res.sigma_area_out = rec.peak.sigma_area / hw
        res.p_signal = rec.p_signal
        res.n_ph = float(bose_einstein(omega_m, t))
        try:
            res.g_opt = g_opt(run.scheme, om, tls, t, rec.p_in)
            res.conversion_m = float(conversion_m(om, tls, t, rec.p_in))
            res.a_ph_uncorrected = phonon_area(rec.a_out, run.scheme, t, rec.p_in, om, tls, None,
                                               dataset.chain, correct_twpa=False,
                                               saturation_power=config.saturation_power)
            if twpa is not None:
                twpa_p = with_extrapolation(twpa.params, config.extrapolate)
                res.delta = float(twpa_transmission(twpa_p, t, rec.p_signal))
                res.a_ph_corrected = phonon_area(rec.a_out, run.scheme, t, rec.p_in, om, tls,
                                                 twpa_p, dataset.chain, correct_twpa=True,
                                                 saturation_power=config.saturation_power)
        except SelfOscillationError as exc:
            res.included, res.reason = False, f"self-oscillating (model): {exc}"
            continue
        except (TwpaSaturationError, MissingCorrectionError, ValueError) as exc:
            res.included, res.reason = False, str(exc)
            continue
        res.a_ph = res.a_ph_corrected if config.correct_twpa else res.a_ph_uncorrected
        res.sigma_a_ph = res.a_ph * res.sigma_area_out / res.area_out
        n_quantum = 1.0 if (config.asymmetry and run.scheme is PumpScheme.BLUE) else 0.0
        res.ratio = (res.a_ph - n_quantum) / res.n_ph
        res.ratio_uncorrected = (res.a_ph_uncorrected - n_quantum) / res.n_ph
    return out


# ------------------------------------------------------------ stage: branch

def choose_branch(medians, tolerance=0.10, t_min=0.1):
    """Pick the hypothesis whose median ``A_ph/n_ph`` is closest to 1 in log.

    ``medians`` maps each :class:`CouplingBranch` to its median ratio over
    runs at ``T >= t_min``. When the two medians agree within ``tolerance``
    the data cannot separate the hypotheses and the overcoupled default is
    returned with ``ambiguous=True``.

    Returns
    -------
    (branch, ambiguous, justification)
    """
    mo = medians[CouplingBranch.OVERCOUPLED]
    mu = medians[CouplingBranch.UNDERCOUPLED]

    def dist(m):
        return abs(math.log(m)) if (math.isfinite(m) and m > 0) else math.inf

    best = min((CouplingBranch.OVERCOUPLED, CouplingBranch.UNDERCOUPLED),
               key=lambda b: dist(medians[b]))
    if math.isinf(dist(mo)) and math.isinf(dist(mu)):
        ambiguous = True
    elif math.isinf(dist(mo)) or math.isinf(dist(mu)):
        ambiguous = False
    else:
        ambiguous = abs(max(mo, mu) / min(mo, mu) - 1.0) < tolerance
    if ambiguous:
        return CouplingBranch.OVERCOUPLED, True, (
            f"branch ambiguous: median A_ph/n_ph above {t_min:g} K is {mo:.3f} (overcoupled) "
            f"vs {mu:.3f} (undercoupled); defaulting to overcoupled")
    return best, False, (
        f"median A_ph/n_ph above {t_min:g} K: overcoupled {mo:.3f}, undercoupled {mu:.3f}; "
        f"{best.value} is closest to 1")


# ------------------------------------------------------- stage: uncertainty

def absolute_scale_uncertainty(budget: UncertaintyBudget, n_samples=2000, seed=DEFAULT_SEED):
    """Monte-Carlo distribution of the multiplicative error on ``A_ph``.

    ``A_ph`` scales as ``kappa_tot**2 / (g0**2 kappa_ext**2 G_chain)`` through
    the conversion factor and the de-embedding; each input is drawn with
    its 95 % half-width and the factor is returned relative to nominal.
    """
    def scale(g0, kappa_ext, kappa_tot, chain_db):
        return kappa_tot ** 2 / (g0 ** 2 * kappa_ext ** 2) * 10.0 ** (-chain_db / 10.0)

    inputs = {
        "g0": relative_normal(1.0, budget.g0_rel),
        "kappa_ext": relative_normal(1.0, budget.kappa_ext_rel),
        "kappa_tot": relative_normal(1.0, budget.kappa_tot_rel),
        "chain_db": db_normal(0.0, budget.chain_db),
    }
    return monte_carlo_propagate(scale, inputs, n_samples, seed, vectorized=True)


# ------------------------------------------------------------------- report

@dataclass
class TemperatureRow:
    t: float
    n_ph: float
    n_runs: int
    a_ph: float
    ratio: float
    stat_95: float
    syst_95: float
    total_95: float
    ratio_uncorrected: float
    delta_model: float


@dataclass
class CalibrationReport:
    config: CalibrationConfig
    dataset_name: str
    provenance: dict
    sweeps: list = field(default_factory=list)
    f_c: float | None = None
    sigma_f_c: float | None = None
    branches: dict = field(default_factory=dict)  # CouplingBranch -> BranchAnalysis
    branch: CouplingBranch | None = None
    branch_ambiguous: bool = False
    branch_justification: str = ""
    twpa: TwpaTlsFit | None = None
    twpa_run_ids: list = field(default_factory=list)
    twpa_saturation_boundary: float | None = None
    peaks: list = field(default_factory=list)
    rows: list = field(default_factory=list)
    scale_rel_95: float | None = None
    reproducibility_95: float | None = None
    notices: list = field(default_factory=list)
    failure: dict | None = None
    ground_truth: dict | None = None
    twpa_rows: list = field(default_factory=list)  # (T, P, pump, delta, model, run)

    @property
    def chosen(self) -> BranchAnalysis | None:
        return self.branches.get(self.branch) if self.branch is not None else None

    @property
    def runs(self):
        return self.chosen.runs if self.chosen else []

    def row(self, t):
        for r in self.rows:
            if abs(r.t - t) <= 1e-12 * max(1.0, t):
                return r
        raise KeyError(t)

    @property
    def contributing(self):
        out = {"sweeps": [s.run_id for s in self.sweeps], "twpa_tls": list(self.twpa_run_ids)}
        ch = self.chosen
        if ch is not None:
            out["coupling"] = list(ch.kappa_ext.run_ids)
            out["cavity_tls"] = [s.run_id for s in self.sweeps] if ch.tls else []
            out["g0"] = list(ch.g0.run_ids) if ch.g0 else []
            out["aph"] = [r.run_id for r in ch.runs if r.included]
        out["peaks"] = [p.run.run_id for p in self.peaks if p.included]
        return out

    @property
    def excluded(self):
        ex = {p.run.run_id: p.reason for p in self.peaks if not p.included}
        if self.chosen is not None:
            ex.update({r.run_id: r.reason for r in self.chosen.runs if not r.included})
        return dict(sorted(ex.items()))

    # -------------------------------------------------------------- output
    def _branch_dict(self, ba: BranchAnalysis):
        med, metric = ba.metric(self.config.branch_t_min)
        d = {
            "kappa_ext_hz": ba.kappa_ext.value / constants.TWO_PI,
            "sigma_kappa_ext_hz": ba.kappa_ext.sigma / constants.TWO_PI,
            "reference_run": ba.kappa_ext.reference_run,
            "sweep_consistency": ba.kappa_ext.consistency,
            "ratio_median_high_t": med,
            "metric_abs_log_ratio": metric,
            "error": ba.error,
        }
        if ba.tls is not None:
            d["tls_residual_cost"] = ba.tls.result.cost
        if ba.g0 is not None:
            d["g0_hz"] = ba.g0.g0 / constants.TWO_PI
        return d

    def to_dict(self):
        ch = self.chosen
        doc = {
            "format": REPORT_FORMAT,
            "version": REPORT_VERSION,
            "dataset": self.dataset_name,
            "provenance": self.provenance,
            "config": asdict(self.config),
            "failure": self.failure,
            "notices": list(self.notices),
            "excluded_runs": self.excluded,
            "contributing_runs": self.contributing,
        }
        if self.f_c is not None:
            doc["cavity"] = {
                "f_c_hz": self.f_c, "sigma_f_c_hz": self.sigma_f_c,
                "sweeps": [{
                    "run_id": s.run_id, "t_k": s.t, "p_in_w": s.p_in,
                    "kappa_tot_hz": s.fit.kappa_tot.hz,
                    "sigma_kappa_tot_hz": s.fit.sigma_kappa_tot / constants.TWO_PI,
                    "depth": s.fit.depth,
                    "kappa_ext_candidates_hz": [s.fit.overcoupled.kappa_ext.hz,
                                                s.fit.undercoupled.kappa_ext.hz],
                } for s in self.sweeps],
            }
        if self.branches:
            doc["branch"] = {
                "chosen": None if self.branch is None else self.branch.value,
                "ambiguous": self.branch_ambiguous,
                "justification": self.branch_justification,
                "candidates": {b.value: self._branch_dict(ba) for b, ba in self.branches.items()},
            }
        if ch is not None and ch.tls is not None:
            p, se = ch.tls.params, ch.tls.stderr
            doc["cavity_tls"] = {
                "kappa_ext_hz": ch.kappa_ext.value / constants.TWO_PI,
                "sigma_kappa_ext_hz": ch.kappa_ext.sigma / constants.TWO_PI,
                "kappa_tls0_hz": p.kappa_tls0.hz,
                "sigma_kappa_tls0_hz": se.get("kappa_tls0", math.nan) / constants.TWO_PI,
                "kappa_dielec0_hz": p.kappa_dielec0.hz,
                "sigma_kappa_dielec0_hz": se.get("kappa_dielec0", math.nan) / constants.TWO_PI,
                "alpha_hz": p.alpha.hz,
                "sigma_alpha_hz": se.get("alpha", math.nan) / constants.TWO_PI,
                "t_c_k": p.t_c, "sigma_t_c_k": se.get("t_c", math.nan),
                "p0_w": {f"{t:g}": [v, se.get(f"p0[T={t:g}]", math.nan)]
                         for t, v in zip(p.p_cav0.temperatures, p.p_cav0.values)},
                "converged": ch.tls.result.converged,
            }
        if self.twpa is not None:
            p, se = self.twpa.params, self.twpa.stderr
            doc["twpa_tls"] = {
                "lambda0": p.lambda0, "sigma_lambda0": se.get("lambda0"),
                "beta": p.beta, "sigma_beta": se.get("beta"),
                "p0_w": {f"{t:g}": [v, se.get(f"p0[T={t:g}]", math.nan)]
                         for t, v in zip(p.p_twpa0.temperatures, p.p_twpa0.values)},
                "saturation_boundary_w": self.twpa_saturation_boundary,
                "saturation_power_used_w": self.config.saturation_power,
            }
        if ch is not None and ch.g0 is not None:
            g = ch.g0
            doc["optomech"] = {
                "omega_m_hz": ch.optomech.omega_m.hz if ch.optomech else None,
                "g0_hz": g.g0 / constants.TWO_PI, "sigma_g0_hz": g.sigma / constants.TWO_PI,
                "g0_blue_hz": None if g.g0_blue is None else g.g0_blue / constants.TWO_PI,
                "sigma_g0_blue_hz": None if g.sigma_blue is None else g.sigma_blue / constants.TWO_PI,
                "g0_red_hz": None if g.g0_red is None else g.g0_red / constants.TWO_PI,
                "sigma_g0_red_hz": None if g.sigma_red is None else g.sigma_red / constants.TWO_PI,
                "blue_red_discrepancy_sigma": g.discrepancy_sigma,
                "blue_red_discrepant": g.discrepant,
                "gamma_m_hz": {f"{t:g}": [v / constants.TWO_PI, s / constants.TWO_PI]
                               for t, (v, s) in sorted(g.gamma_m.items())},
            }
        if ch is not None and ch.runs:
            doc["runs"] = [{k: v for k, v in asdict(r).items()} for r in ch.runs]
        if self.rows:
            doc["aph_over_nph"] = [asdict(r) for r in self.rows]
        if self.scale_rel_95 is not None:
            doc["error_budget"] = {
                "absolute_scale_rel_95": self.scale_rel_95,
                "reproducibility_rel_95": self.reproducibility_95,
                "inputs": asdict(self.config.budget),
            }
        if self.ground_truth is not None:
            doc["ground_truth_comparison"] = self.ground_truth
        return _clean(doc)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json(), encoding="utf-8")
        write_plot_csvs(self.to_dict(), out, self)
        return out / "report.json"

    def summary(self):
        return summary_table(self.to_dict())


def write_plot_csvs(doc, out, report=None):
    """Plot-ready tables: damping versus power, transmission versus power, A_ph/n_ph versus T."""
    out = Path(out)
    lines = ["t_k,p_in_w,kappa_tot_hz,sigma_kappa_tot_hz,model_kappa_tot_hz,run_id"]
    tls = report.chosen.tls if report is not None and report.chosen is not None else None
    for s in doc.get("cavity", {}).get("sweeps", []):
        model = tls.kappa_tot(s["t_k"], s["p_in_w"]) / constants.TWO_PI if tls else math.nan
        lines.append(",".join([repr(s["t_k"]), repr(s["p_in_w"]), repr(s["kappa_tot_hz"]),
                               repr(s["sigma_kappa_tot_hz"]), repr(float(model)), s["run_id"]]))
    (out / "kappa_vs_power.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    lines = ["t_k,power_w,twpa_pump,transmission,model_transmission,run_id"]
    if report is not None and report.twpa is not None:
        for item in report.twpa_rows:
            lines.append(",".join(repr(x) if isinstance(x, float) else str(x) for x in item))
    (out / "delta_vs_power.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    lines = ["t_k,n_ph,n_runs,a_ph,ratio,stat_95,syst_95,total_95,ratio_uncorrected,delta_model"]
    for r in doc.get("aph_over_nph", []):
        lines.append(",".join(repr(r[k]) if r[k] is not None else "nan" for k in
                              ("t", "n_ph", "n_runs", "a_ph", "ratio", "stat_95", "syst_95",
                               "total_95", "ratio_uncorrected", "delta_model")))
    (out / "aph_over_nph_vs_T.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(x, spec=".3g"):
    return "-" if x is None else format(x, spec)


def summary_table(doc):
    out = [f"calibration report: {doc.get('dataset')}"]
    if doc.get("failure"):
        f = doc["failure"]
        out.append(f"FAILED at stage '{f['stage']}': {f['message']}")
    br = doc.get("branch")
    if br:
        amb = " (ambiguous, default)" if br["ambiguous"] else ""
        out.append(f"coupling branch: {br['chosen']}{amb}")
    om = doc.get("optomech")
    if om:
        out.append(f"g0/2pi = {om['g0_hz']:.2f} +- {om['sigma_g0_hz']:.2f} Hz")
    ct = doc.get("cavity_tls")
    if ct:
        out.append(f"kappa_ext/2pi = {ct['kappa_ext_hz'] / 1e3:.2f} kHz, "
                   f"kappa_TLS0/2pi = {ct['kappa_tls0_hz'] / 1e3:.1f} kHz")
    tw = doc.get("twpa_tls")
    if tw:
        out.append(f"TWPA lambda0 = {tw['lambda0']:.4f} +- {_fmt(tw['sigma_lambda0'], '.4f')}")
    eb = doc.get("error_budget")
    if eb:
        out.append(f"absolute scale (95%): +-{100 * eb['absolute_scale_rel_95']:.1f} %   "
                   f"reproducibility (95%): +-{100 * (eb['reproducibility_rel_95'] or 0):.1f} %")
    rows = doc.get("aph_over_nph", [])
    if rows:
        out.append("")
        out.append(f"{'T [mK]':>8} {'n_ph':>9} {'A_ph':>9} {'A_ph/n_ph':>10} {'stat95':>8} "
                   f"{'syst95':>8} {'uncorr':>8} {'runs':>5}")
        for r in rows:
            out.append(f"{1e3 * r['t']:8.1f} {r['n_ph']:9.3f} {_fmt(r['a_ph'], '9.3f')} "
                       f"{_fmt(r['ratio'], '10.3f')} {_fmt(r['stat_95'], '8.3f')} "
                       f"{_fmt(r['syst_95'], '8.3f')} {_fmt(r['ratio_uncorrected'], '8.3f')} "
                       f"{r['n_runs']:5d}")
    ex = doc.get("excluded_runs", {})
    if ex:
        out.append("")
        out.append(f"excluded runs: {len(ex)}")
        for k, v in ex.items():
            out.append(f"  {k}: {v}")
    return "\n".join(out)


# --------------------------------------------------------------- orchestration

def _provenance(dataset: Dataset, config: CalibrationConfig):
    return {
        "tool": "optocal", "tool_version": __version__, "seed": config.seed,
        "input_hashes": dict(sorted(dataset.hashes.items())),
        "synthetic": dataset.synthetic,
    }


def _temperature_rows(report: CalibrationReport, dataset: Dataset, config: CalibrationConfig,
                      scale_samples):
    ch = report.chosen
    omega_m = ch.optomech.omega_m
    rows = []
    by_t = {}
    for r in ch.runs:
        if r.included and math.isfinite(r.ratio):
            by_t.setdefault(r.t, []).append(r)
    t_unc = {float(run.t_cryo): run.t_uncertainty for run in dataset.by_kind(RunKind.SIDEBAND_SPECTRUM)}
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7]))
    for t in sorted(by_t):
        rs = by_t[t]
        ratios = np.array([r.ratio for r in rs])
        unc = np.array([r.ratio_uncorrected for r in rs])
        n_ph = float(bose_einstein(omega_m, t))
        mean = float(ratios.mean())
        stat = 1.96 * float(ratios.std(ddof=1)) / math.sqrt(len(rs)) if len(rs) > 1 else math.nan
        # thermometry and absolute scale, sampled jointly
        t_draw = t * (1.0 + t_unc.get(t, 0.05) / 1.959963984540054
                      * rng.standard_normal(scale_samples.size))
        t_draw = np.clip(t_draw, 1e-6, None)
        samples = mean * scale_samples * n_ph / bose_einstein(omega_m, t_draw)
        lo, hi = np.percentile(samples, [2.5, 97.5])
        syst = 0.5 * float(hi - lo)
        deltas = [r.delta for r in rs if math.isfinite(r.delta)]
        rows.append(TemperatureRow(
            t=t, n_ph=n_ph, n_runs=len(rs), a_ph=float(np.mean([r.a_ph for r in rs])),
            ratio=mean, stat_95=stat, syst_95=syst,
            total_95=math.hypot(stat, syst) if math.isfinite(stat) else syst,
            ratio_uncorrected=float(unc.mean()),
            delta_model=float(np.mean(deltas)) if deltas else math.nan))
    return rows


def _ground_truth_comparison(report: CalibrationReport, truth: dict):
    ch = report.chosen
    out = {"branch_true": truth.get("branch"),
           "branch_chosen": None if report.branch is None else report.branch.value}
    if ch is not None:
        out["kappa_ext_hz"] = [truth.get("kappa_ext_hz"), ch.kappa_ext.value / constants.TWO_PI]
        if ch.g0 is not None:
            out["g0_hz"] = [truth.get("g0_hz"), ch.g0.g0 / constants.TWO_PI]
        if ch.tls is not None:
            tt = truth.get("cavity_tls", {})
            out["kappa_tls0_hz"] = [tt.get("kappa_tls0_hz"), ch.tls.params.kappa_tls0.hz]
    if report.twpa is not None:
        out["lambda0"] = [truth.get("twpa_tls", {}).get("lambda0"), report.twpa.params.lambda0]
    out["expected_ratio"] = 1.0
    return out


def run_calibration(dataset: Dataset, config: CalibrationConfig | None = None) -> CalibrationReport:
    """Run every stage on ``dataset``; see the module docstring for the order."""
    config = config or CalibrationConfig()
    report = CalibrationReport(config=config, dataset_name=dataset.name,
                               provenance=_provenance(dataset, config))

    def fail(stage, message):
        report.failure = {"stage": stage, "message": message}
        raise StageError(stage, message, report)

    kinds = {r.kind for r in dataset.runs}
    temps = {float(r.t_cryo) for r in dataset.runs}
    if RunKind.REFLECTION_SWEEP not in kinds or RunKind.SIDEBAND_SPECTRUM not in kinds:
        missing = [k.value for k in (RunKind.REFLECTION_SWEEP, RunKind.SIDEBAND_SPECTRUM)
                   if k not in kinds]
        fail("ingest", "dataset lacks run kind(s): " + ", ".join(missing))
    if len(temps) < 2:
        fail("ingest", "dataset spans fewer than two temperatures")

    # 1. sweeps
    report.sweeps = fit_sweeps(dataset, config, report.notices)
    log.info("sweeps: %d fitted", len(report.sweeps))
    if len({s.t for s in report.sweeps}) < 2:
        fail("sweeps", "fewer than two temperatures with a usable reflection fit")
    fcs = np.array([float(s.fit.f_c) for s in report.sweeps])
    report.f_c = float(np.median(fcs))
    report.sigma_f_c = float(1.2533 * fcs.std(ddof=1) / math.sqrt(fcs.size)) if fcs.size > 1 else math.nan

    # 2. coupling hypotheses
    kext = kappa_ext_candidates(report.sweeps, config.kappa_ext_tolerance)

    # 4. TWPA model (independent of the hypotheses)
    off_pts, off_ids = twpa_points(dataset, pump_on=False)
    on_pts, on_ids = twpa_points(dataset, pump_on=True)
    if off_pts:
        try:
            report.twpa = fit_tls_twpa(off_pts, report.f_c)
        except (IdentifiabilityError, FitError, ValueError) as exc:
            if config.correct_twpa:
                fail("twpa-tls", f"TWPA TLS fit failed: {exc}")
            report.notices.append(f"TWPA TLS fit failed: {exc}")
        report.twpa_run_ids = off_ids
        report.twpa_saturation_boundary = saturation_boundary(off_pts, on_pts)
        if report.twpa is not None:
            for (t, p, d), rid in _tag(off_pts, dataset, False):
                m = float(twpa_transmission(with_extrapolation(report.twpa.params, True), t, p))
                report.twpa_rows.append((t, p, "off", d, m, rid))
            for (t, p, d), rid in _tag(on_pts, dataset, True):
                m = float(twpa_transmission(with_extrapolation(report.twpa.params, True), t, p))
                report.twpa_rows.append((t, p, "on", d, m, rid))
    elif config.correct_twpa:
        fail("twpa-tls", "missing run kind 'twpa_scan' with twpa_pump=off, required for the "
                         "TWPA correction (use --no-twpa-correction to proceed without it)")
    else:
        report.notices.append("TWPA correction disabled; no TWPA scans used")

    # 5. peaks
    report.peaks = fit_peaks(dataset, report.f_c, config)
    log.info("peaks: %d of %d usable", sum(p.included for p in report.peaks), len(report.peaks))
    for p in report.peaks:
        if not p.included:
            report.notices.append(f"run {p.run.run_id} excluded: {p.reason}")
        elif p.peak.low_confidence:
            report.notices.append(f"run {p.run.run_id}: low SNR ({p.peak.snr:.2f})")
    if not any(p.included for p in report.peaks):
        fail("peaks", "no usable sideband spectrum")

    # 3, 6, 7 per hypothesis
    for branch in (CouplingBranch.OVERCOUPLED, CouplingBranch.UNDERCOUPLED):
        report.branches[branch] = analyse_branch(branch, kext[branch], report.sweeps, report.peaks,
                                                 report.twpa, dataset, report.f_c, config)
    usable = {b: ba for b, ba in report.branches.items() if ba.error is None}
    if not usable:
        msgs = "; ".join(f"{b.value}: {ba.error}" for b, ba in report.branches.items())
        stage = "cavity-tls" if all("TLS" in (ba.error or "") for ba in report.branches.values()) else "g0"
        fail(stage, msgs)

    for b, ba in report.branches.items():
        log.info("branch %s: %s", b.value, ba.error or "ok")

    # 8. branch decision
    medians = {b: ba.metric(config.branch_t_min)[0] for b, ba in usable.items()}
    if len(usable) == 1:
        (report.branch,) = usable
        other = report.branch.other
        report.branch_justification = (
            f"{other.value} hypothesis failed ({report.branches[other].error})")
    else:
        report.branch, report.branch_ambiguous, report.branch_justification = choose_branch(
            medians, config.ambiguity_tolerance, config.branch_t_min)
        if report.branch_ambiguous:
            warnings.warn(report.branch_justification, AmbiguousBranchWarning, stacklevel=2)
            report.notices.append(report.branch_justification)
    if report.chosen.g0.discrepant:
        report.notices.append(
            f"blue/red g0 estimates differ by {report.chosen.g0.discrepancy_sigma:.1f} sigma")

    # 9. uncertainty
    mc = absolute_scale_uncertainty(config.budget, config.n_monte_carlo, config.seed)
    report.scale_rel_95 = mc.relative_half_width_95
    scale = mc.samples[np.isfinite(mc.samples)]
    report.rows = _temperature_rows(report, dataset, config, scale)
    ratios = report.chosen.ratios()
    if ratios.size > 1:
        report.reproducibility_95 = float(1.96 * ratios.std(ddof=1) / ratios.mean())
    if dataset.synthetic:
        report.ground_truth = _ground_truth_comparison(report, dataset.ground_truth)
    return report


def _tag(points, dataset, pump_on):
    """Attach run ids to flattened TWPA scan points (same order as :func:`twpa_points`)."""
    out = []
    i = 0
    for run in dataset.by_kind(RunKind.TWPA_SCAN):
        if run.twpa_pump != pump_on:
            continue
        for _ in range(run.data.power_w.size):
            out.append((points[i], run.run_id))
            i += 1
    return out


def calibrate_path(manifest, out_dir, config: CalibrationConfig | None = None):
    """Ingest, calibrate and write; returns the report (partial reports are written too)."""
    ds = ingest(manifest)
    try:
        report = run_calibration(ds, config)
    except StageError as exc:
        if exc.partial is not None:
            exc.partial.write(out_dir)
        raise
    report.write(out_dir)
    return report
