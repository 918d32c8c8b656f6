"""Forward simulation of a complete calibration dataset with known ground truth.

Every generated quantity is produced by the same model functions the
calibration inverts, evaluated at the scenario's true parameters, with
seeded noise on top:

* reflection sweeps: additive Gaussian noise in dB,
* sideband spectra: a Lorentzian on a flat system-noise floor, with a
  multiplicative area error, a slow run-to-run drift with a 1/f spectrum,
  and the scatter of an averaged PSD,
* TWPA scans: additive Gaussian noise on the transmission.

Each run draws from its own child of the scenario seed, so a dataset is
bit-identical however it is produced.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import constants
from .cavity import CavityParams, ReflectionTrace, s11_db
from .dataset import Dataset, RunKind, RunRecord, TwpaScan, chain_to_manifest
from .optomech import (OptomechParams, PumpScheme, SelfOscillation, bose_einstein, gamma_eff,
                       sideband_area, self_oscillation_threshold)
from .peaks import Spectrum, lorentzian
from .tls import TemperatureTable, TlsLossParams, TwpaTlsParams, kappa_in, twpa_transmission
from .units import AngularRate, ChainCal, Power, apply_chain, dbm_to_watts

SCENARIO_FORMAT = "optocal-scenario"
SCENARIO_VERSION = 1


class ScenarioError(ValueError):
    """Invalid scenario document."""


@dataclass
class NoiseModel:
    sweep_db: float = 0.1  # additive, per point
    area_rel: float = 0.05  # multiplicative, per sideband run
    drift_rms: float = 0.10  # 1/f run-to-run amplitude drift
    drift_exponent: float = 1.0
    transmission: float = 0.003  # additive, per TWPA scan point
    psd_averages: float = 1e5  # relative PSD scatter is 1/sqrt(averages)
    system_noise_quanta: float = 3.5

    def __post_init__(self):
        for name in ("sweep_db", "area_rel", "drift_rms", "transmission", "system_noise_quanta"):
            if getattr(self, name) < 0:
                raise ScenarioError(f"noise.{name} must be >= 0")
        if self.psd_averages <= 0:
            raise ScenarioError("noise.psd_averages must be > 0")

    def scaled(self, factor):
        """Every stochastic amplitude multiplied by ``factor``; the floor level is kept."""
        return replace(self, sweep_db=self.sweep_db * factor, area_rel=self.area_rel * factor,
                       drift_rms=self.drift_rms * factor, transmission=self.transmission * factor,
                       psd_averages=self.psd_averages / factor ** 2 if factor > 0 else math.inf)

    @property
    def psd_rel(self):
        return 0.0 if math.isinf(self.psd_averages) else 1.0 / math.sqrt(self.psd_averages)


@dataclass
class GridConfig:
    temperatures: tuple = (0.004, 0.010, 0.020, 0.050, 0.100, 0.150, 0.200, 0.250,
                           0.300, 0.350, 0.400)
    sweep_powers_dbm: tuple = tuple(float(x) for x in range(-130, -65, 5))  # on chip
    sweep_points: int = 401
    sweep_span_linewidths: float = 12.0
    twpa_powers_w: tuple = tuple(float(x) for x in np.logspace(-19, -11, 33))  # TWPA input
    twpa_off_temperatures: tuple | None = None  # None: every grid temperature
    twpa_on_temperatures: tuple = (0.150,)
    blue_fractions: tuple = (0.1, 0.25, 0.45, 0.7)  # of the self-oscillation threshold
    red_fractions: tuple = (0.1, 0.5, 1.5, 3.0)
    self_oscillation_fraction: float = 1.3
    self_oscillation_max_t: float = 0.020
    spectrum_bins: int = 801
    spectrum_span_linewidths: float = 40.0

    def __post_init__(self):
        self.temperatures = tuple(sorted(float(t) for t in self.temperatures))
        if not self.temperatures:
            raise ScenarioError("grid.temperatures must not be empty")
        if any(t <= 0 for t in self.temperatures):
            raise ScenarioError("grid temperatures must be > 0")
        self.sweep_powers_dbm = tuple(float(p) for p in self.sweep_powers_dbm)
        self.twpa_powers_w = tuple(float(p) for p in self.twpa_powers_w)
        if self.twpa_off_temperatures is not None:
            self.twpa_off_temperatures = tuple(float(t) for t in self.twpa_off_temperatures)
        self.twpa_on_temperatures = tuple(float(t) for t in self.twpa_on_temperatures)
        self.blue_fractions = tuple(float(x) for x in self.blue_fractions)
        self.red_fractions = tuple(float(x) for x in self.red_fractions)

    @property
    def twpa_off(self):
        return self.temperatures if self.twpa_off_temperatures is None else self.twpa_off_temperatures


@dataclass
class SaturationModel:
    """Phenomenological TWPA compression ``(1 + P/knee)**-exponent * exp(-P/hard)``."""

    knee_w: float = 1e-16
    knee_exponent: float = 0.1
    hard_w: float = 1e-14

    def rolloff(self, p):
        p = np.asarray(p, dtype=float)
        return (1.0 + p / self.knee_w) ** (-self.knee_exponent) * np.exp(-p / self.hard_w)


@dataclass
class ScenarioConfig:
    name: str
    seed: int
    f_c_hz: float
    kappa_ext_hz: float
    omega_m_hz: float
    g0_hz: float
    gamma_m: TemperatureTable  # rad/s
    tls: TlsLossParams
    twpa: TwpaTlsParams
    chain: ChainCal
    grid: GridConfig = field(default_factory=GridConfig)
    noise: NoiseModel = field(default_factory=NoiseModel)
    saturation: SaturationModel = field(default_factory=SaturationModel)
    asymmetry: bool = False

    def __post_init__(self):
        if self.seed is None:
            raise ScenarioError("a scenario needs a seed")
        self.seed = int(self.seed)
        for name in ("f_c_hz", "kappa_ext_hz", "omega_m_hz", "g0_hz"):
            if not getattr(self, name) > 0:
                raise ScenarioError(f"{name} must be > 0")

    @property
    def cavity(self):
        """Cavity at the fully saturated, lowest-loss operating point."""
        return CavityParams.from_hz(self.f_c_hz, self.kappa_ext_hz,
                                    self.tls.kappa_dielec0.hz)

    @property
    def optomech(self):
        return OptomechParams(AngularRate.from_hz(self.omega_m_hz), self.gamma_m,
                              AngularRate.from_hz(self.g0_hz), self.cavity)

    def kappa_tot(self, t, p_in):
        return AngularRate.from_hz(self.kappa_ext_hz) + kappa_in(self.tls, t, p_in)

    def with_noise(self, noise: NoiseModel):
        return replace(self, noise=noise)

    def with_seed(self, seed):
        return replace(self, seed=int(seed))


# ------------------------------------------------------------ scenario files

def _law(spec, temps, what, scale=1.0):
    """Evaluate a per-temperature law onto ``temps`` as a table (values times ``scale``)."""
    if isinstance(spec, (int, float)) and not isinstance(spec, bool):
        vals = [float(spec)] * len(temps)
    elif isinstance(spec, dict) and spec.get("law") == "quadratic":
        v, t_ref = float(spec["value"]), float(spec["t_ref_k"])
        vals = [v * (1.0 + (t / t_ref) ** 2) for t in temps]
    elif isinstance(spec, dict) and spec.get("law") == "table":
        table = TemperatureTable.from_mapping({float(k): v for k, v in spec["values"].items()})
        vals = [table(t) for t in temps]
    else:
        raise ScenarioError(f"{what}: expected a number or a quadratic/table law, got {spec!r}")
    return TemperatureTable(tuple(temps), tuple(x * scale for x in vals))


def scenario_from_dict(doc) -> ScenarioConfig:
    try:
        if doc.get("format") != SCENARIO_FORMAT:
            raise ScenarioError(f"format must be {SCENARIO_FORMAT!r}")
        if doc.get("version") != SCENARIO_VERSION:
            raise ScenarioError(f"unsupported scenario version {doc.get('version')!r}")
        grid = GridConfig(**doc.get("grid", {}))
        temps = grid.temperatures
        dev = doc["device"]
        ct = doc["cavity_tls"]
        tw = doc["twpa_tls"]
        ch = doc["chain"]
        f_c = float(dev["f_c_hz"])
        tls = TlsLossParams(
            kappa_tls0=AngularRate.from_hz(ct["kappa_tls0_hz"]),
            p_cav0=_law(ct["p0_w"], temps, "cavity_tls.p0_w"),
            kappa_dielec0=AngularRate.from_hz(ct["kappa_dielec0_hz"]),
            alpha=AngularRate.from_hz(ct["alpha_hz"]), t_c=float(ct["t_c_k"]), f_c=f_c)
        twpa = TwpaTlsParams(lambda0=float(tw["lambda0"]), beta=float(tw["beta"]),
                             p_twpa0=_law(tw["p0_w"], temps, "twpa_tls.p0_w"), f_c=f_c)
        chain = ChainCal(ch["injection_attenuation_db"], ch["detection_gain_db"],
                         ch.get("twpa_gain_db", 18.0))
        return ScenarioConfig(
            name=str(doc.get("name", "scenario")), seed=doc["seed"], f_c_hz=f_c,
            kappa_ext_hz=float(dev["kappa_ext_hz"]), omega_m_hz=float(dev["omega_m_hz"]),
            g0_hz=float(dev["g0_hz"]),
            gamma_m=_law(dev["gamma_m_hz"], temps, "device.gamma_m_hz", constants.TWO_PI),
            tls=tls, twpa=twpa, chain=chain, grid=grid,
            noise=NoiseModel(**doc.get("noise", {})),
            saturation=SaturationModel(**doc.get("twpa_saturation", {})),
            asymmetry=bool(doc.get("asymmetry", False)),
        )
    except KeyError as exc:
        raise ScenarioError(f"missing scenario field {exc.args[0]!r}") from exc
    except TypeError as exc:
        raise ScenarioError(str(exc)) from exc


def load_scenario(path) -> ScenarioConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return scenario_from_dict(doc)


def bundled_scenario_path(name="paper_replica"):
    return Path(__file__).parent / "data" / f"{name}.scenario"


def load_bundled(name="paper_replica") -> ScenarioConfig:
    return load_scenario(bundled_scenario_path(name))


# ---------------------------------------------------------------- generators

def _rng(config, rng):
    return np.random.default_rng(config.seed) if rng is None else rng


def gen_reflection_sweep(config: ScenarioConfig, t, p_in, rng=None) -> ReflectionTrace:
    """Reflection magnitude at on-chip power ``p_in`` with TLS-dependent ``kappa_in``."""
    rng = _rng(config, rng)
    params = CavityParams(config.f_c_hz, AngularRate.from_hz(config.kappa_ext_hz),
                          kappa_in(config.tls, t, p_in))
    span = config.grid.sweep_span_linewidths * params.kappa_tot.hz
    f = config.f_c_hz + np.linspace(-0.5 * span, 0.5 * span, config.grid.sweep_points)
    mag = s11_db(params, f)
    if config.noise.sweep_db > 0:
        mag = mag + config.noise.sweep_db * rng.standard_normal(f.size)
    return ReflectionTrace(f, mag)


@dataclass
class SyntheticPeak:
    spectrum: Spectrum
    self_oscillating: bool
    truth: dict


def gen_sideband_peak(config: ScenarioConfig, t, p_in, scheme: PumpScheme, rng=None,
                      drift=1.0) -> SyntheticPeak:
    """Output-referred PSD [W/Hz] of one sideband run.

    Past the blue threshold a flagged record is returned whose spectrum holds
    a single-bin line on the noise floor.
    """
    rng = _rng(config, rng)
    om = config.optomech
    tls = config.tls
    hw = constants.HBAR * constants.TWO_PI * config.f_c_hz
    g_det = config.chain.detection_gain.linear
    floor = g_det * hw * config.noise.system_noise_quanta
    n_ph = bose_einstein(om.omega_m, t)
    ge = gamma_eff(scheme, om, tls, t, p_in)
    gm = float(om.gamma_m_at(t))
    nbin = config.grid.spectrum_bins

    if isinstance(ge, SelfOscillation):
        span = config.grid.spectrum_span_linewidths * gm / constants.TWO_PI
        f = config.f_c_hz + np.linspace(-0.5 * span, 0.5 * span, nbin)
        psd = np.full(nbin, floor)
        psd[nbin // 2] += 1e6 * floor
        psd = psd * (1.0 + config.noise.psd_rel * rng.standard_normal(nbin))
        truth = {"self_oscillating": True, "gamma_opt_over_gamma_m": ge.margin, "n_ph": n_ph}
        return SyntheticPeak(Spectrum(f, psd), True, truth)

    a_chip = float(sideband_area(n_ph, scheme, om, tls, t, p_in, asymmetry=config.asymmetry))
    p_sig = a_chip * hw  # the chip output is the TWPA input plane
    delta = float(twpa_transmission(config.twpa, t, p_sig))
    area_factor = 1.0 + config.noise.area_rel * rng.standard_normal() if config.noise.area_rel else 1.0
    a_obs = a_chip * delta * drift * area_factor
    area_w = g_det * hw * a_obs

    fwhm = float(ge) / constants.TWO_PI
    span = config.grid.spectrum_span_linewidths * fwhm
    f = config.f_c_hz + np.linspace(-0.5 * span, 0.5 * span, nbin)
    psd = lorentzian(f, config.f_c_hz, 0.5 * fwhm, area_w, floor)
    if config.noise.psd_rel > 0:
        psd = psd * (1.0 + config.noise.psd_rel * rng.standard_normal(nbin))
    truth = {
        "self_oscillating": False, "n_ph": n_ph, "a_sdb_chip": a_chip, "delta": delta,
        "drift": drift, "area_factor": area_factor, "area_out_w": area_w,
        "gamma_eff_hz": fwhm, "p_signal_w": p_sig,
    }
    return SyntheticPeak(Spectrum(f, psd), False, truth)


def gen_twpa_scan(config: ScenarioConfig, t, pump_on=False, rng=None) -> TwpaScan:
    """Gain-normalised TWPA transmission versus probe power at the TWPA input."""
    rng = _rng(config, rng)
    p = np.asarray(config.grid.twpa_powers_w, dtype=float)
    delta = twpa_transmission(config.twpa, t, p)
    if pump_on:
        delta = delta * config.saturation.rolloff(p)
    if config.noise.transmission > 0:
        delta = delta + config.noise.transmission * rng.standard_normal(p.size)
    return TwpaScan(p, delta)


def gen_kappa_grid(config: ScenarioConfig, temperatures, powers, rel_noise=0.0, rng=None):
    """``(T, P_in, kappa_tot)`` triples with multiplicative Gaussian noise."""
    rng = _rng(config, rng)
    out = []
    for t in temperatures:
        for p in powers:
            k = float(config.kappa_tot(t, p))
            if rel_noise:
                k *= 1.0 + rel_noise * rng.standard_normal()
            out.append((float(t), float(p), k))
    return out


def pink_drift(n, rms, exponent, rng):
    """Zero-mean sequence of length ``n`` with a ``1/f**exponent`` spectrum and given RMS."""
    if n == 0 or rms == 0:
        return np.zeros(n)
    if n == 1:
        return np.zeros(1)
    spec = rng.standard_normal(n // 2 + 1) + 1j * rng.standard_normal(n // 2 + 1)
    freq = np.fft.rfftfreq(n)
    freq[0] = np.inf
    x = np.fft.irfft(spec * freq ** (-0.5 * exponent), n)
    x -= x.mean()
    return rms * x / x.std()


# ------------------------------------------------------------------- dataset

def _plan(config: ScenarioConfig):
    """Ordered run list without data: sweeps, TWPA scans, then sideband runs."""
    grid = config.grid
    plan = []
    for t in grid.temperatures:
        for dbm in grid.sweep_powers_dbm:
            p_in = dbm_to_watts(dbm)
            plan.append(dict(kind=RunKind.REFLECTION_SWEEP, t=t, p_in=float(p_in), scheme=None,
                             pump=True, flags=()))
    for t in grid.twpa_off:
        plan.append(dict(kind=RunKind.TWPA_SCAN, t=t, p_in=None, scheme=None, pump=False, flags=()))
    for t in grid.twpa_on_temperatures:
        plan.append(dict(kind=RunKind.TWPA_SCAN, t=t, p_in=None, scheme=None, pump=True, flags=()))
    om = config.optomech
    for t in grid.temperatures:
        p_th = self_oscillation_threshold(om, config.tls, t)
        for scheme, fracs in ((PumpScheme.BLUE, grid.blue_fractions),
                              (PumpScheme.RED, grid.red_fractions)):
            for x in fracs:
                plan.append(dict(kind=RunKind.SIDEBAND_SPECTRUM, t=t, p_in=x * p_th,
                                 scheme=scheme, pump=True, flags=()))
        if grid.self_oscillation_fraction and t <= grid.self_oscillation_max_t:
            plan.append(dict(kind=RunKind.SIDEBAND_SPECTRUM, t=t,
                             p_in=grid.self_oscillation_fraction * p_th, scheme=PumpScheme.BLUE,
                             pump=True, flags=("self_oscillating",)))
    for i, item in enumerate(plan):
        prefix = {RunKind.REFLECTION_SWEEP: "sweep", RunKind.TWPA_SCAN: "twpa",
                  RunKind.SIDEBAND_SPECTRUM: "sdb"}[item["kind"]]
        item["id"] = f"{prefix}-{i:04d}"
        if item["p_in"] is not None:
            item["p_gen"] = float(apply_chain(item["p_in"], config.chain, "source"))
    return plan


def _hz_table(table: TemperatureTable, scale=1.0):
    return {f"{t:g}": v / scale for t, v in zip(table.temperatures, table.values)}


def ground_truth_block(config: ScenarioConfig):
    tls, twpa = config.tls, config.twpa
    return {
        "scenario": config.name,
        "seed": config.seed,
        "f_c_hz": config.f_c_hz,
        "kappa_ext_hz": config.kappa_ext_hz,
        "branch": config.cavity.branch.value,
        "omega_m_hz": config.omega_m_hz,
        "g0_hz": config.g0_hz,
        "gamma_m_hz": _hz_table(config.gamma_m, constants.TWO_PI),
        "cavity_tls": {
            "kappa_tls0_hz": tls.kappa_tls0.hz, "kappa_dielec0_hz": tls.kappa_dielec0.hz,
            "alpha_hz": tls.alpha.hz, "t_c_k": tls.t_c, "p0_w": _hz_table(tls.p_cav0),
        },
        "twpa_tls": {"lambda0": twpa.lambda0, "beta": twpa.beta, "p0_w": _hz_table(twpa.p_twpa0)},
        "noise": asdict(config.noise),
        "asymmetry": config.asymmetry,
        "n_ph": {f"{t:g}": bose_einstein(config.optomech.omega_m, t)
                 for t in config.grid.temperatures},
        "runs": {},
    }


def generate_dataset(config: ScenarioConfig) -> Dataset:
    """Simulate every run of the scenario grid in memory."""
    plan = _plan(config)
    children = np.random.SeedSequence(config.seed).spawn(len(plan) + 1)
    sdb_index = [i for i, item in enumerate(plan) if item["kind"] is RunKind.SIDEBAND_SPECTRUM]
    drift = 1.0 + pink_drift(len(sdb_index), config.noise.drift_rms, config.noise.drift_exponent,
                             np.random.default_rng(children[-1]))
    drift = np.clip(drift, 0.05, None)
    drift_of = dict(zip(sdb_index, drift))
    truth = ground_truth_block(config)
    runs = []
    for i, item in enumerate(plan):
        rng = np.random.default_rng(children[i])
        kind, t = item["kind"], item["t"]
        flags = item["flags"]
        if kind is RunKind.REFLECTION_SWEEP:
            data = gen_reflection_sweep(config, t, item["p_in"], rng)
            folder = "sweeps"
            truth["runs"][item["id"]] = {
                "p_in_w": item["p_in"], "kappa_tot_hz": config.kappa_tot(t, item["p_in"]) / constants.TWO_PI}
        elif kind is RunKind.TWPA_SCAN:
            data = gen_twpa_scan(config, t, pump_on=item["pump"], rng=rng)
            folder = "twpa"
        else:
            peak = gen_sideband_peak(config, t, item["p_in"], item["scheme"], rng, float(drift_of[i]))
            data = peak.spectrum
            folder = "spectra"
            truth["runs"][item["id"]] = dict(peak.truth, p_in_w=item["p_in"])
        runs.append(RunRecord(
            run_id=item["id"], kind=kind, t_cryo=t, file=f"{folder}/{item['id']}.csv",
            p_generator=None if item["p_in"] is None else Power(item["p_gen"]),
            scheme=item["scheme"], twpa_pump=item["pump"], flags=flags, data=data))
    return Dataset(
        name=config.name, runs=runs, chain=config.chain,
        device={"omega_m_hz": config.omega_m_hz, "f_c_hz_nominal": config.f_c_hz},
        twpa_scan_reference="twpa_input", ground_truth=truth,
    )


def scenario_to_dict(config: ScenarioConfig):
    """Inverse of :func:`scenario_from_dict`, with per-temperature laws as tables."""
    tls, twpa = config.tls, config.twpa
    grid = asdict(config.grid)
    return {
        "format": SCENARIO_FORMAT, "version": SCENARIO_VERSION, "name": config.name,
        "seed": config.seed,
        "device": {"f_c_hz": config.f_c_hz, "kappa_ext_hz": config.kappa_ext_hz,
                   "omega_m_hz": config.omega_m_hz, "g0_hz": config.g0_hz,
                   "gamma_m_hz": {"law": "table",
                                  "values": _hz_table(config.gamma_m, constants.TWO_PI)}},
        "cavity_tls": {"kappa_tls0_hz": tls.kappa_tls0.hz, "kappa_dielec0_hz": tls.kappa_dielec0.hz,
                       "alpha_hz": tls.alpha.hz, "t_c_k": tls.t_c,
                       "p0_w": {"law": "table", "values": _hz_table(tls.p_cav0)}},
        "twpa_tls": {"lambda0": twpa.lambda0, "beta": twpa.beta,
                     "p0_w": {"law": "table", "values": _hz_table(twpa.p_twpa0)}},
        "twpa_saturation": asdict(config.saturation),
        "chain": {k: v for k, v in chain_to_manifest(config.chain).items()
                  if k.endswith("_db")},
        "grid": {k: (list(v) if isinstance(v, tuple) else v) for k, v in grid.items()},
        "noise": asdict(config.noise),
        "asymmetry": config.asymmetry,
    }

