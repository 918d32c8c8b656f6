"""Command-line frontend: ``optocal {generate,fit,calibrate,report,selftest}``.

Exit codes: 0 success, 1 computational failure, 2 I/O or configuration failure.
Summaries go to standard output; machine artifacts go to files only.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import fields, replace
from pathlib import Path

from . import __version__
from .constants import TWO_PI
from .dataset import DatasetError, RunKind, RunRecord, ingest, load_run_data, write_dataset
from .fitting import FitError
from .pipeline import (DEFAULT_SEED, REPORT_FORMAT, CalibrationConfig, StageError, run_calibration,
                       summary_table)
from .synth import (NoiseModel, ScenarioError, bundled_scenario_path, generate_dataset,
                    load_scenario, scenario_to_dict)

EXIT_OK, EXIT_COMPUTE, EXIT_IO = 0, 1, 2

log = logging.getLogger("optocal")


class UsageError(Exception):
    """Bad configuration detected by the CLI itself (exit 2)."""


def _writable_dir(path):
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".optocal-write-test"
        probe.write_text("", encoding="utf-8")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"output directory {out} is not writable: {exc.strerror or exc}") from exc
    return out


def _noise_overrides(base: NoiseModel, scale, pairs):
    noise = base if scale is None else base.scaled(scale)
    names = {f.name for f in fields(NoiseModel)}
    updates = {}
    for item in pairs or ():
        key, sep, value = item.partition("=")
        if not sep or key not in names:
            raise UsageError(f"--noise expects NAME=VALUE with NAME in {sorted(names)}, got {item!r}")
        try:
            updates[key] = float(value)
        except ValueError as exc:
            raise UsageError(f"--noise {key}: {value!r} is not a number") from exc
    return replace(noise, **updates)


# ---------------------------------------------------------------- commands

def cmd_generate(args):
    path = Path(args.scenario) if args.scenario else bundled_scenario_path()
    try:
        scenario = load_scenario(path)
    except OSError as exc:
        raise UsageError(f"cannot read scenario {path}: {exc.strerror or exc}") from exc
    scenario = scenario.with_seed(args.seed)
    scenario = scenario.with_noise(_noise_overrides(scenario.noise, args.noise_scale, args.noise))
    if args.asymmetry:
        scenario = replace(scenario, asymmetry=True)
    out = _writable_dir(args.out)
    ds = generate_dataset(scenario)
    manifest = write_dataset(ds, out, power_unit=args.power_unit)
    (out / "scenario.json").write_text(
        json.dumps(scenario_to_dict(scenario), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    (out / "ground_truth.json").write_text(
        json.dumps(ds.ground_truth, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    temps = sorted({float(r.t_cryo) for r in ds.runs})
    print(f"generated {len(ds.runs)} runs for '{scenario.name}' (seed {scenario.seed}), "
          f"{1e3 * temps[0]:g}-{1e3 * temps[-1]:g} mK")
    print(f"manifest: {manifest}")
    return EXIT_OK


def cmd_fit(args):
    from .cavity import fit_reflection
    from .peaks import integrate_peak

    path = Path(args.file)
    if not path.is_file():
        raise UsageError(f"no such file: {path}")
    kind = RunKind.REFLECTION_SWEEP if args.kind == "sweep" else RunKind.SIDEBAND_SPECTRUM
    data = load_run_data(RunRecord("cli", kind, 1.0, path.name), path.parent)
    if args.kind == "sweep":
        fit = fit_reflection(data)
        doc = {
            "f_c_hz": float(fit.f_c), "sigma_f_c_hz": fit.sigma_f_c,
            "kappa_tot_hz": fit.kappa_tot.hz, "sigma_kappa_tot_hz": fit.sigma_kappa_tot / TWO_PI,
            "candidates": {p.branch.value: {"kappa_ext_hz": p.kappa_ext.hz, "kappa_in_hz": p.kappa_in.hz}
                           for p in fit.pair},
        }
        print(f"f_c = {doc['f_c_hz']:.6f} Hz   kappa_tot/2pi = {doc['kappa_tot_hz']:.1f} Hz")
        for name, c in doc["candidates"].items():
            print(f"  {name:13s} kappa_ext/2pi = {c['kappa_ext_hz']:.1f} Hz, "
                  f"kappa_in/2pi = {c['kappa_in_hz']:.1f} Hz")
    else:
        peak = integrate_peak(data, baseline=args.baseline)
        doc = {
            "center_hz": peak.center, "gamma_eff_hz": peak.linewidth.hz,
            "sigma_gamma_eff_hz": peak.sigma_linewidth / TWO_PI,
            "area": peak.area, "sigma_area": peak.sigma_area, "area_numeric": peak.area_numeric,
            "baseline": peak.baseline, "snr": peak.snr, "low_confidence": peak.low_confidence,
        }
        flag = "  (low confidence)" if peak.low_confidence else ""
        print(f"center = {peak.center:.3f} Hz   Gamma_eff/2pi = {peak.linewidth.hz:.3f} Hz   "
              f"area = {peak.area:.6g} +- {peak.sigma_area:.2g}   SNR = {peak.snr:.1f}{flag}")
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_calibrate(args):
    out = _writable_dir(args.out)
    ds = ingest(args.manifest)
    config = CalibrationConfig(
        correct_twpa=not args.no_twpa_correction, seed=args.seed, threads=args.threads,
        n_monte_carlo=args.mc_samples, asymmetry=args.asymmetry, extrapolate=args.extrapolate)
    t0 = time.perf_counter()
    try:
        report = run_calibration(ds, config)
    except StageError as exc:
        if exc.partial is not None:
            exc.partial.write(out)
            print(summary_table(exc.partial.to_dict()))
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE
    report.write(out)
    log.info("calibration finished in %.2f s", time.perf_counter() - t0)
    print(report.summary())
    return EXIT_OK


def cmd_report(args):
    path = Path(args.report)
    if path.is_dir():
        path = path / "report.json"
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"cannot read report {path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON at line {exc.lineno}") from exc
    if doc.get("format") != REPORT_FORMAT:
        raise UsageError(f"{path} is not a calibration report")
    print(summary_table(doc))
    return EXIT_COMPUTE if doc.get("failure") else EXIT_OK


def cmd_selftest(args):
    from .selftest import run_selftest

    overrides = {}
    for item in args.inject_fault or ():
        key, _, value = item.partition("=")
        overrides[key] = float(value)
    t0 = time.perf_counter()
    results = run_selftest(overrides)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name}" + (f"  {r.detail}" if r.detail else ""))
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed "
          f"in {time.perf_counter() - t0:.2f} s")
    if failed:
        print("failed: " + ", ".join(failed))
        return EXIT_COMPUTE
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser():
    p = argparse.ArgumentParser(prog="optocal", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset from a scenario")
    g.add_argument("--scenario", help="scenario file (default: bundled paper_replica)")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--noise-scale", type=float, help="multiply every noise amplitude (0 = noiseless)")
    g.add_argument("--noise", action="append", metavar="NAME=VALUE",
                   help="override one noise-model field; repeatable")
    g.add_argument("--asymmetry", action="store_true", help="blue sidebands carry n + 1 quanta")
    g.add_argument("--power-unit", choices=("W", "dBm"), default="W")
    g.set_defaults(func=cmd_generate)

    f = sub.add_parser("fit", help="fit a single trace file")
    f.add_argument("file")
    f.add_argument("--kind", choices=("sweep", "spectrum"), required=True)
    f.add_argument("--baseline", choices=("fit", "edges", "none"), default="fit")
    f.add_argument("--out", help="write the fitted values as JSON")
    f.set_defaults(func=cmd_fit)

    c = sub.add_parser("calibrate", help="run the full calibration on a manifest")
    c.add_argument("manifest", help="manifest file or dataset directory")
    c.add_argument("--out", required=True, help="report directory")
    c.add_argument("--no-twpa-correction", action="store_true")
    c.add_argument("--asymmetry", action="store_true",
                   help="subtract the zero-point quantum from blue areas")
    c.add_argument("--extrapolate", action="store_true",
                   help="allow TLS tables outside the measured temperatures")
    c.add_argument("--seed", type=int, default=DEFAULT_SEED)
    c.add_argument("--threads", type=int, default=1)
    c.add_argument("--mc-samples", type=int, default=2000)
    c.set_defaults(func=cmd_calibrate)

    r = sub.add_parser("report", help="print the summary of a written report")
    r.add_argument("report", help="report.json or its directory")
    r.set_defaults(func=cmd_report)

    s = sub.add_parser("selftest", help="run the embedded invariant checks")
    s.add_argument("--inject-fault", action="append", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, DatasetError, ScenarioError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FitError, ArithmeticError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
