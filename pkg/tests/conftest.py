import numpy as np
import pytest

from app.grid import GridFunction
from app.models import CorpusRecipe, ExperimentConfig, GridSpec, MixedNormSpec


@pytest.fixture
def rng():
    """Seeded generator so every test sees the same samples."""
    return np.random.default_rng(20240611)


@pytest.fixture
def line():
    """1-D grid with 128 samples."""
    return GridSpec(levels=(7,))


@pytest.fixture
def square():
    """2-D grid with 32 x 32 samples."""
    return GridSpec(levels=(5, 5))


@pytest.fixture
def mean_zero_line(rng, line):
    """Random real function on the line grid with zero mean."""
    values = rng.normal(size=line.shape)
    return GridFunction(line, values - values.mean())


@pytest.fixture
def small_main_config():
    """Two band-limited fixtures on a 32 x 32 grid with one scalar norm."""
    return ExperimentConfig(
        grid=GridSpec(levels=(5, 5)),
        norms=[MixedNormSpec(p=(2.0, 2.0))],
        corpus=CorpusRecipe(name="bumps", count=2, max_frequency=4),
        seed=3,
    )
