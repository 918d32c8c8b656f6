import json
import shutil
import warnings

import numpy as np
import pytest

from optocal.dataset import (DuplicateRunError, ManifestError, MissingFileError, RunKind,
                             RunRecord, TraceFormatError, default_t_uncertainty, ingest,
                             parse_manifest, write_dataset)
from optocal.optomech import PumpScheme


@pytest.fixture(scope="module")
def written(replica_dataset, tmp_path_factory):
    root = tmp_path_factory.mktemp("replica")
    write_dataset(replica_dataset, root)
    return root


def copy_of(written, tmp_path):
    dst = tmp_path / "ds"
    shutil.copytree(written, dst)
    return dst


def edit_manifest(root, fn):
    path = root / "manifest.json"
    doc = json.loads(path.read_text())
    fn(doc)
    path.write_text(json.dumps(doc))
    return path


class TestIngest:
    def test_round_trip_without_warnings(self, written, replica_dataset):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            ds = ingest(written)
        assert len(ds.runs) == len(replica_dataset.runs)
        for a, b in zip(ds.runs, replica_dataset.runs):
            assert a.key == b.key and a.run_id == b.run_id
        sweep = ds.by_kind(RunKind.REFLECTION_SWEEP)[0]
        ref = replica_dataset.run(sweep.run_id).data
        assert np.array_equal(sweep.data.mag_db, ref.mag_db)

    def test_hashes_recorded(self, written):
        ds = ingest(written / "manifest.json")
        assert "manifest.json" in ds.hashes
        assert all(len(h) == 64 for h in ds.hashes.values())
        assert len(ds.hashes) == len(ds.runs) + 1

    def test_synthetic_flag_and_truth(self, written):
        ds = ingest(written)
        assert ds.synthetic
        assert ds.ground_truth["g0_hz"] == pytest.approx(220.0)

    def test_mixed_power_units(self, written, tmp_path):
        root = copy_of(written, tmp_path)
        ref = ingest(root)

        def to_dbm(doc):
            doc["units"]["power"] = "dBm"
            for run in doc["runs"]:
                if run["p_generator"] is not None:
                    run["p_generator"] = 10 * np.log10(run["p_generator"] / 1e-3)
            # one run keeps watts through a per-run override
            doc["runs"][0]["power_unit"] = "W"
            doc["runs"][0]["p_generator"] = float(ref.runs[0].p_generator)

        edit_manifest(root, to_dbm)
        ds = ingest(root)
        for a, b in zip(ds.runs, ref.runs):
            if b.p_generator is not None:
                assert a.p_generator == pytest.approx(b.p_generator, rel=1e-12)

    def test_dbm_written_manifest(self, replica_dataset, tmp_path):
        write_dataset(replica_dataset, tmp_path, power_unit="dBm")
        ds = ingest(tmp_path)
        r0 = replica_dataset.runs[0]
        assert ds.run(r0.run_id).p_generator == pytest.approx(r0.p_generator, rel=1e-12)

    def test_truncated_csv_names_file_and_line(self, written, tmp_path):
        root = copy_of(written, tmp_path)
        run = ingest(root).by_kind(RunKind.SIDEBAND_SPECTRUM)[0]
        path = root / run.file
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:40]) + "\n" + lines[40].split(",")[0] + "\n")
        with pytest.raises(TraceFormatError) as exc:
            ingest(root)
        assert str(exc.value).endswith(":41: expected 2 columns, got 1")
        assert run.file in str(exc.value)

    def test_non_numeric_cell(self, written, tmp_path):
        root = copy_of(written, tmp_path)
        run = ingest(root).by_kind(RunKind.REFLECTION_SWEEP)[0]
        path = root / run.file
        lines = path.read_text().splitlines()
        lines[5] = "abc,1.0"
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(TraceFormatError, match=r"sweep-0000.csv:6:"):
            ingest(root)

    def test_missing_file(self, written, tmp_path):
        root = copy_of(written, tmp_path)
        run = ingest(root).runs[3]
        (root / run.file).unlink()
        with pytest.raises(MissingFileError, match=run.file.split("/")[-1]):
            ingest(root)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(MissingFileError):
            ingest(tmp_path)

    def test_duplicate_runs(self, written, tmp_path):
        root = copy_of(written, tmp_path)

        def dup(doc):
            extra = dict(doc["runs"][0])
            extra["id"] = "dup-0001"
            doc["runs"].append(extra)

        edit_manifest(root, dup)
        with pytest.raises(DuplicateRunError):
            ingest(root)

    @pytest.mark.parametrize("field,value,where", [
        ("kind", "noise_trace", "runs[2].kind"),
        ("t_cryo_k", -1.0, "runs[2].t_cryo_k"),
        ("scheme", "green", "runs[2].scheme"),
        ("twpa_pump", "maybe", "runs[2].twpa_pump"),
        ("p_generator", "lots", "runs[2].p_generator"),
    ])
    def test_schema_violations_name_the_field(self, written, tmp_path, field, value, where):
        root = copy_of(written, tmp_path)
        edit_manifest(root, lambda doc: doc["runs"][2].__setitem__(field, value))
        with pytest.raises(ManifestError) as exc:
            ingest(root)
        assert exc.value.field == where

    def test_bad_format_tag(self):
        with pytest.raises(ManifestError):
            parse_manifest({"format": "other", "version": 1})

    def test_inputs_not_mutated(self, written):
        before = {p.name: p.read_bytes() for p in written.rglob("*") if p.is_file()}
        ingest(written)
        after = {p.name: p.read_bytes() for p in written.rglob("*") if p.is_file()}
        assert before == after


class TestRunRecord:
    def test_default_thermometry(self):
        assert default_t_uncertainty(0.004) == 0.2
        assert default_t_uncertainty(0.1) == 0.05
        r = RunRecord("x", RunKind.SIDEBAND_SPECTRUM, 0.004, "f.csv", 1e-3, PumpScheme.RED)
        assert r.t_uncertainty == 0.2

    def test_key_distinguishes_twpa_pump(self):
        a = RunRecord("a", RunKind.TWPA_SCAN, 0.15, "a.csv", twpa_pump=True)
        b = RunRecord("b", RunKind.TWPA_SCAN, 0.15, "b.csv", twpa_pump=False)
        assert a.key != b.key
