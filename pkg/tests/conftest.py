import numpy as np
import pytest

from abflab import compute_free_energy, make_cosine_model


@pytest.fixture(scope="session")
def model():
    """Canonical cosine-family model: c=1, a=1/2, k=4, beta=1."""
    return make_cosine_model(c=1.0, a=0.5, k=4.0, beta=1.0)


@pytest.fixture(scope="session")
def profile(model):
    """Reference free-energy profile on 256 coordinate points."""
    return compute_free_energy(model, np.arange(256) / 256)
