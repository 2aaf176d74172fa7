import numpy as np
import pytest

from opdiff import engine as E


@pytest.fixture(autouse=True)
def strict_engine():
    """Tests run with invalid arithmetic raising instead of producing NaN."""
    previous = E.set_strict(True)
    yield
    E.set_strict(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
