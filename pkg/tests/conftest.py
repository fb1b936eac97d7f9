import numpy as np
import pytest

from sslmtpp.data import GapScaler


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def unit_scaler():
    return GapScaler(0.0, 1.0)
