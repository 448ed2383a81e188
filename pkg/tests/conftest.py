import numpy as np
import pytest

from patchtts import numerics as nm


@pytest.fixture(autouse=True)
def _reset_numerics():
    yield
    nm.set_default_dtype(np.float32)
    nm.set_finite_checks(True)


@pytest.fixture
def f64():
    with nm.precision(np.float64):
        yield
