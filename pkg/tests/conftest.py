import logging

import hypothesis
import numpy as np
import pytest

from surrogate_cv.data_model import PairedDataset, SurrogateDataset
from surrogate_cv.synthetic import GaussianPopulation

hypothesis.settings.register_profile("surrogate_cv", deadline=None, max_examples=100)
hypothesis.settings.register_profile("fast", deadline=None, max_examples=10)
hypothesis.settings.load_profile("surrogate_cv")


@pytest.fixture(autouse=True)
def _restore_root_logging():
    """The CLI reconfigures the root logger; undo it so later tests log normally."""
    root = logging.getLogger()
    handlers, level = root.handlers[:], root.level
    yield
    root.handlers[:] = handlers
    root.setLevel(level)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def write_text(tmp_path):
    """Write content to tmp_path/name and return the path as a string."""
    def _write(name, content):
        path = tmp_path / name
        path.write_text(content, encoding="utf-8")
        return str(path)
    return _write


@pytest.fixture
def gaussian_data():
    """200 paired and 2000 surrogate samples with rho = 0.8."""
    return GaussianPopulation(rho=0.8, seed=7).sample(200, 2000)


@pytest.fixture
def identical_data(rng):
    """Paired samples with F == G, plus a surrogate pool from the same distribution."""
    values = rng.normal(3.0, 2.0, size=100)
    paired = PairedDataset.from_arrays(values, values)
    surrogate = SurrogateDataset.from_arrays(rng.normal(3.0, 2.0, size=400))
    return paired, surrogate
