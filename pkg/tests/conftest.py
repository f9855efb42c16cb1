import numpy as np
import pytest

from sns2d import SpectralField


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


@pytest.fixture
def random_field(rng):
    def make(cutoff=8, amplitude=1.0, decay=0.5):
        return SpectralField.random(cutoff, rng, amplitude=amplitude, decay=decay)

    return make
