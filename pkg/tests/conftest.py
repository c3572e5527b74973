import numpy as np
import pytest

from volforce import tensor as T


@pytest.fixture(autouse=True)
def _restore_default_dtype():
    # tests that flip the float64 toggle must not leak it
    before = T.default_dtype()
    yield
    T.set_default_dtype(before)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
