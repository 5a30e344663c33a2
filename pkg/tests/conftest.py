import os
import sys

# Deterministic BLAS before numpy ever loads.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import numpy as np
import pytest

import mri2ct.tensor as T


@pytest.fixture(autouse=True)
def _clean_tape():
    """Every test starts and ends with an empty autodiff tape."""
    T.clear_tape()
    yield
    T.clear_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
