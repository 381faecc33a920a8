import logging

import numpy as np
import pytest

from ledgerfl import he


@pytest.fixture(scope="session")
def small():
    params = he.small_params(1024)
    return params, he.keygen(params, seed=11)


@pytest.fixture(scope="session")
def proto():
    params = he.default_params(4096)
    return params, he.keygen(params, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _quiet_penalty_logs(caplog):
    caplog.set_level(logging.ERROR, logger="ledgerfl")
