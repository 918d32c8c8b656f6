import math
import os
import warnings
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from optocal.pipeline import CalibrationConfig, run_calibration
from optocal.synth import generate_dataset, load_bundled

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.register_profile("ci", deadline=None, max_examples=200)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

TWO_PI = 2.0 * math.pi


@pytest.fixture(scope="session")
def replica():
    return load_bundled()


@pytest.fixture(scope="session")
def replica_dataset(replica):
    return generate_dataset(replica)


@pytest.fixture(scope="session")
def replica_report(replica_dataset):
    return run_calibration(replica_dataset)


@pytest.fixture(scope="session")
def replica_report_uncorrected(replica_dataset):
    return run_calibration(replica_dataset, CalibrationConfig(correct_twpa=False))


@pytest.fixture(scope="session")
def small_replica(replica):
    """Reduced grid for tests that repeat the full chain."""
    grid = replace(replica.grid, temperatures=(0.02, 0.1, 0.2, 0.3, 0.4),
                   sweep_powers_dbm=replica.grid.sweep_powers_dbm[::2])
    return replace(replica, grid=grid)


@pytest.fixture
def quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        yield


def rng(seed=0):
    return np.random.default_rng(seed)
