import numpy as np
import pytest

from spmamba import autodiff as ad
from spmamba.rng import Rng


@pytest.fixture(autouse=True)
def float64():
    ad.set_default_dtype(np.float64)
    yield
    ad.set_default_dtype(np.float64)


@pytest.fixture
def rng():
    return Rng(1234)


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(b))))
