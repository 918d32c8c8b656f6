"""Run records, the dataset manifest and the CSV trace formats.

A dataset is a directory holding ``manifest.json`` and one CSV file per run.
The manifest lists the runs together with the chain calibration and the
device constants that are not fitted (the mechanical frequency). Synthetic
datasets additionally carry a ``ground_truth`` block.

CSV layouts (header row, comma separated, ``.`` decimal separator)::

    reflection_sweep   freq_hz,mag_db     or   freq_hz,re,im
    sideband_spectrum  freq_hz,psd        (W/Hz at the recording plane)
    twpa_scan          power_w,transmission
"""

from __future__ import annotations

import csv
import enum
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cavity import ReflectionTrace
from .optomech import PumpScheme
from .peaks import Spectrum
from .units import ChainCal, Power, Temperature, UnitError, dbm_to_watts

MANIFEST_FORMAT = "optocal-manifest"
MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"


class DatasetError(Exception):
    """Base class for ingestion failures."""


class ManifestError(DatasetError):
    """Schema violation; ``field`` names the offending entry."""

    def __init__(self, message, field=None):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


class MissingFileError(DatasetError):
    def __init__(self, path):
        super().__init__(f"referenced file not found: {path}")
        self.path = Path(path)


class TraceFormatError(DatasetError):
    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = Path(path)
        self.line = line


class DuplicateRunError(DatasetError):
    """Two runs share (T, P, scheme, kind, twpa_pump)."""


class RunKind(enum.Enum):
    REFLECTION_SWEEP = "reflection_sweep"
    SIDEBAND_SPECTRUM = "sideband_spectrum"
    TWPA_SCAN = "twpa_scan"


def default_t_uncertainty(t):
    """Relative 95 % thermometry uncertainty: 20 % below 10 mK, 5 % above."""
    return 0.20 if t < 0.010 else 0.05


@dataclass
class TwpaScan:
    power_w: np.ndarray
    transmission: np.ndarray

    def __post_init__(self):
        self.power_w = np.asarray(self.power_w, dtype=float)
        self.transmission = np.asarray(self.transmission, dtype=float)
        if self.power_w.ndim != 1 or self.power_w.shape != self.transmission.shape:
            raise ValueError("power and transmission arrays must be 1-D and equal length")
        if np.any(self.power_w <= 0):
            raise ValueError("scan powers must be > 0")


@dataclass
class RunRecord:
    run_id: str
    kind: RunKind
    t_cryo: Temperature
    file: str
    p_generator: Power | None = None  # W
    scheme: PumpScheme | None = None  # None for probe-only runs
    twpa_pump: bool = True
    t_uncertainty: float | None = None  # relative, 95 % half-width
    flags: tuple = ()
    data: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.t_cryo = Temperature(self.t_cryo)
        if self.p_generator is not None:
            self.p_generator = Power(self.p_generator)
        if self.t_uncertainty is None:
            self.t_uncertainty = default_t_uncertainty(self.t_cryo)
        self.flags = tuple(self.flags)

    @property
    def key(self):
        return (float(self.t_cryo), None if self.p_generator is None else float(self.p_generator),
                None if self.scheme is None else self.scheme.value, self.kind.value, self.twpa_pump)

    @property
    def self_oscillating(self):
        return "self_oscillating" in self.flags

    def to_manifest(self, power_unit="W"):
        if self.p_generator is None:
            p = None
        elif power_unit == "dBm":
            p = self.p_generator.dbm
        else:
            p = float(self.p_generator)
        return {
            "id": self.run_id, "kind": self.kind.value, "t_cryo_k": float(self.t_cryo),
            "t_uncertainty": self.t_uncertainty, "p_generator": p,
            "scheme": "probe" if self.scheme is None else self.scheme.value,
            "twpa_pump": "on" if self.twpa_pump else "off", "file": self.file,
            "flags": list(self.flags),
        }


@dataclass
class Dataset:
    name: str
    runs: list
    chain: ChainCal
    device: dict  # omega_m_hz and optional nominal values
    twpa_scan_reference: str = "twpa_input"
    ground_truth: dict | None = None
    root: Path | None = None
    hashes: dict = field(default_factory=dict)  # relative path -> sha256

    def __post_init__(self):
        check_duplicates(self.runs)

    def by_kind(self, kind: RunKind):
        return [r for r in self.runs if r.kind is kind]

    def run(self, run_id):
        for r in self.runs:
            if r.run_id == run_id:
                return r
        raise KeyError(run_id)

    @property
    def synthetic(self):
        return self.ground_truth is not None

    @property
    def omega_m_hz(self):
        return float(self.device["omega_m_hz"])


def check_duplicates(runs):
    seen = {}
    for r in runs:
        if r.run_id in seen:
            raise DuplicateRunError(f"run id {r.run_id!r} appears twice")
        seen[r.run_id] = r
    keys = {}
    for r in runs:
        key = r.key
        if key in keys:
            raise DuplicateRunError(
                f"runs {keys[key]!r} and {r.run_id!r} share (T, P, scheme, kind, twpa_pump) = {key}")
        keys[key] = r.run_id


# ------------------------------------------------------------------- CSV I/O

_COLUMNS = {
    RunKind.REFLECTION_SWEEP: (("freq_hz", "mag_db"), ("freq_hz", "re", "im")),
    RunKind.SIDEBAND_SPECTRUM: (("freq_hz", "psd"),),
    RunKind.TWPA_SCAN: (("power_w", "transmission"),),
}


def read_table(path, layouts):
    """Read a numeric CSV whose header matches one of ``layouts``."""
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except FileNotFoundError as exc:
        raise MissingFileError(path) from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise TraceFormatError(path, 1, "empty file") from None
        if tuple(header) not in layouts:
            raise TraceFormatError(path, 1, f"unexpected header {header}; expected one of "
                                   + ", ".join(",".join(c) for c in layouts))
        rows = []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise TraceFormatError(path, line, f"expected {len(header)} columns, got {len(row)}")
            try:
                values = [float(c) for c in row]
            except ValueError:
                raise TraceFormatError(path, line, f"non-numeric value in {row}") from None
            if not all(math.isfinite(v) for v in values):
                raise TraceFormatError(path, line, "non-finite value")
            rows.append(values)
    if len(rows) < 2:
        raise TraceFormatError(path, 2, "fewer than two data rows")
    return tuple(header), np.array(rows)


def write_table(path, header, columns):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.column_stack([np.asarray(c, dtype=float) for c in columns])
    np.savetxt(path, data, fmt="%.17g", delimiter=",", header=",".join(header), comments="",
               newline="\n", encoding="utf-8")


def load_run_data(run: RunRecord, root: Path):
    header, table = read_table(root / run.file, _COLUMNS[run.kind])
    path = root / run.file
    try:
        if run.kind is RunKind.REFLECTION_SWEEP:
            if header == ("freq_hz", "re", "im"):
                return ReflectionTrace.from_complex(table[:, 0], table[:, 1], table[:, 2])
            return ReflectionTrace(table[:, 0], table[:, 1])
        if run.kind is RunKind.SIDEBAND_SPECTRUM:
            return Spectrum(table[:, 0], table[:, 1])
        return TwpaScan(table[:, 0], table[:, 1])
    except ValueError as exc:
        raise TraceFormatError(path, 2, str(exc)) from exc


def save_run_data(run: RunRecord, root: Path):
    data = run.data
    path = Path(root) / run.file
    if run.kind is RunKind.REFLECTION_SWEEP:
        if data.re is not None:
            write_table(path, ("freq_hz", "re", "im"), (data.freq_hz, data.re, data.im))
        else:
            write_table(path, ("freq_hz", "mag_db"), (data.freq_hz, data.mag_db))
    elif run.kind is RunKind.SIDEBAND_SPECTRUM:
        write_table(path, ("freq_hz", "psd"), (data.freq_hz, data.psd))
    else:
        write_table(path, ("power_w", "transmission"), (data.power_w, data.transmission))


# ------------------------------------------------------------------ manifest

def _require(mapping, key, where, kind=None):
    if not isinstance(mapping, dict) or key not in mapping:
        raise ManifestError("missing required field", f"{where}.{key}" if where else key)
    value = mapping[key]
    if kind is not None and not isinstance(value, kind):
        raise ManifestError(f"expected {kind.__name__ if isinstance(kind, type) else kind}, "
                            f"got {type(value).__name__}", f"{where}.{key}")
    return value


def _number(mapping, key, where, default=None):
    if key not in mapping:
        if default is None:
            raise ManifestError("missing required field", f"{where}.{key}")
        return default
    value = mapping[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ManifestError(f"expected a finite number, got {value!r}", f"{where}.{key}")
    return float(value)


def _power(value, unit, where):
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ManifestError(f"expected a number, got {value!r}", where)
    try:
        if unit == "dBm":
            return dbm_to_watts(value)
        if unit == "W":
            return Power(value)
    except UnitError as exc:
        raise ManifestError(str(exc), where) from exc
    raise ManifestError(f"unknown power unit {unit!r} (use 'dBm' or 'W')", where)


def chain_to_manifest(chain: ChainCal, reference="twpa_input"):
    out = {
        "injection_attenuation_db": float(chain.injection_attenuation),
        "detection_gain_db": float(chain.detection_gain),
        "twpa_gain_db": float(chain.twpa_gain),
        "twpa_scan_reference": reference,
    }
    if chain.twpa_injection_attenuation is not None:
        out["twpa_injection_attenuation_db"] = float(chain.twpa_injection_attenuation)
    return out


def parse_manifest(doc, root=None):
    """Validate a manifest document and return an (unloaded) :class:`Dataset`."""
    if not isinstance(doc, dict):
        raise ManifestError("manifest must be a JSON object")
    fmt = _require(doc, "format", "", str)
    if fmt != MANIFEST_FORMAT:
        raise ManifestError(f"expected {MANIFEST_FORMAT!r}, got {fmt!r}", "format")
    version = _require(doc, "version", "", int)
    if version != MANIFEST_VERSION:
        raise ManifestError(f"unsupported version {version}", "version")
    units = doc.get("units", {"power": "W"})
    default_unit = units.get("power", "W") if isinstance(units, dict) else None
    if default_unit not in ("W", "dBm"):
        raise ManifestError(f"unknown power unit {default_unit!r}", "units.power")

    ch = _require(doc, "chain", "", dict)
    twpa_inj = ch.get("twpa_injection_attenuation_db")
    chain = ChainCal(
        injection_attenuation=_number(ch, "injection_attenuation_db", "chain"),
        detection_gain=_number(ch, "detection_gain_db", "chain"),
        twpa_gain=_number(ch, "twpa_gain_db", "chain", 18.0),
        twpa_injection_attenuation=None if twpa_inj is None else _number(
            ch, "twpa_injection_attenuation_db", "chain"),
    )
    reference = ch.get("twpa_scan_reference", "twpa_input")
    if reference not in ("twpa_input", "generator"):
        raise ManifestError(f"unknown reference plane {reference!r}", "chain.twpa_scan_reference")
    if reference == "generator" and chain.twpa_injection_attenuation is None:
        raise ManifestError("generator-referenced TWPA scans need twpa_injection_attenuation_db",
                            "chain")

    device = _require(doc, "device", "", dict)
    omega = _number(device, "omega_m_hz", "device")
    if omega <= 0:
        raise ManifestError("must be > 0", "device.omega_m_hz")

    runs = []
    for i, entry in enumerate(_require(doc, "runs", "", list)):
        where = f"runs[{i}]"
        run_id = _require(entry, "id", where, str)
        kind_s = _require(entry, "kind", where, str)
        try:
            kind = RunKind(kind_s)
        except ValueError:
            raise ManifestError(f"unknown run kind {kind_s!r}", f"{where}.kind") from None
        t = _number(entry, "t_cryo_k", where)
        if t <= 0:
            raise ManifestError("must be > 0", f"{where}.t_cryo_k")
        unit = entry.get("power_unit", default_unit)
        p = _power(entry.get("p_generator"), unit, f"{where}.p_generator")
        if p is None and kind is not RunKind.TWPA_SCAN:
            raise ManifestError("missing required field", f"{where}.p_generator")
        scheme_s = entry.get("scheme", "probe")
        if scheme_s == "probe":
            scheme = None
        else:
            try:
                scheme = PumpScheme(scheme_s)
            except ValueError:
                raise ManifestError(f"unknown scheme {scheme_s!r}", f"{where}.scheme") from None
        if kind is RunKind.SIDEBAND_SPECTRUM and scheme is None:
            raise ManifestError("sideband spectra need a blue or red scheme", f"{where}.scheme")
        pump = entry.get("twpa_pump", "on")
        if pump not in ("on", "off"):
            raise ManifestError(f"expected 'on' or 'off', got {pump!r}", f"{where}.twpa_pump")
        t_unc = entry.get("t_uncertainty")
        if t_unc is not None:
            t_unc = _number(entry, "t_uncertainty", where)
        flags = entry.get("flags", [])
        if not isinstance(flags, list) or not all(isinstance(x, str) for x in flags):
            raise ManifestError("expected a list of strings", f"{where}.flags")
        runs.append(RunRecord(
            run_id=run_id, kind=kind, t_cryo=t, file=_require(entry, "file", where, str),
            p_generator=p, scheme=scheme, twpa_pump=pump == "on", t_uncertainty=t_unc,
            flags=tuple(flags)))
    return Dataset(
        name=str(doc.get("name", "dataset")), runs=runs, chain=chain, device=dict(device),
        twpa_scan_reference=reference, ground_truth=doc.get("ground_truth"),
        root=None if root is None else Path(root),
    )


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def ingest(manifest_path) -> Dataset:
    """Load and validate a dataset from its manifest, reading every run file."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    if not manifest_path.exists():
        raise MissingFileError(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    root = manifest_path.parent
    ds = parse_manifest(doc, root)
    ds.hashes[MANIFEST_NAME] = _sha256(manifest_path)
    for run in ds.runs:
        run.data = load_run_data(run, root)
        ds.hashes[run.file] = _sha256(root / run.file)
    return ds


def manifest_document(ds: Dataset, power_unit="W"):
    doc = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "name": ds.name,
        "units": {"power": power_unit},
        "chain": chain_to_manifest(ds.chain, ds.twpa_scan_reference),
        "device": ds.device,
        "runs": [r.to_manifest(power_unit) for r in ds.runs],
    }
    if ds.ground_truth is not None:
        doc["ground_truth"] = ds.ground_truth
    return doc


def write_dataset(ds: Dataset, out_dir, power_unit="W"):
    """Write every run file and the manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for run in ds.runs:
        if run.data is None:
            raise DatasetError(f"run {run.run_id} has no data to write")
        save_run_data(run, out)
    path = out / MANIFEST_NAME
    text = json.dumps(manifest_document(ds, power_unit), indent=1, sort_keys=True)
    path.write_text(text + "\n", encoding="utf-8")
    return path
