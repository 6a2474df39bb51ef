import numpy as np
import pytest

from genalign.karyogram import load_band_table


@pytest.fixture(scope="session")
def band_table():
    return load_band_table()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
