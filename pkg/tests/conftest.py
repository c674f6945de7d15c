import numpy as np
import pytest

from tvlp import source


@pytest.fixture(scope="session")
def small_wavetable():
    """A reduced LF wavetable so oscillator tests stay fast."""
    return source.build_lf_wavetable(np.linspace(0.3, 2.7, 9), 512)


@pytest.fixture(scope="session")
def full_wavetable():
    return source.default_wavetable()


@pytest.fixture
def rng():
    return np.random.default_rng(0)
