import time

import pytest

from optocal import constants
from optocal.cli import EXIT_COMPUTE, EXIT_OK, main
from optocal.selftest import CHECKS, patched_constants, run_selftest


def test_all_checks_pass():
    results = run_selftest()
    assert len(results) == len(CHECKS)
    assert all(r.passed for r in results), [r for r in results if not r.passed]


def test_cli_selftest_fast(capsys):
    t0 = time.perf_counter()
    assert main(["selftest"]) == EXIT_OK
    assert time.perf_counter() - t0 < 60.0
    out = capsys.readouterr().out
    assert f"{len(CHECKS)}/{len(CHECKS)} checks passed" in out


def test_injected_boltzmann_fault_detected(capsys):
    assert main(["selftest", "--inject-fault", "K_B=1.3e-23"]) == EXIT_COMPUTE
    out = capsys.readouterr().out
    assert "FAIL  tanh_limits" in out and "FAIL  bose_einstein" in out


@pytest.mark.parametrize("name", ["HBAR", "H"])
def test_injected_planck_fault_detected(name):
    results = run_selftest({name: getattr(constants, name) * 1.01})
    assert not all(r.passed for r in results)


def test_patch_is_restored():
    before = constants.K_B
    run_selftest({"K_B": 1.0})
    assert constants.K_B == before
    with pytest.raises(RuntimeError):
        with patched_constants({"K_B": 2.0}):
            raise RuntimeError
    assert constants.K_B == before
