import numpy as np
import pytest

from abhpinn.economy import ModelParams
from abhpinn.net import InputScaler, init
from abhpinn.sampler import sample_batch


@pytest.fixture
def model():
    return ModelParams().check()


@pytest.fixture
def scaler(model):
    return InputScaler.from_bounds(
        model.a_min, model.a_max, model.z_min, model.z_max, model.horizon
    )


@pytest.fixture
def tiny_value(scaler):
    return init(11, (3, 8, 1), "identity")


@pytest.fixture
def tiny_density(scaler):
    return init(12, (3, 8, 1), "softplus")


@pytest.fixture
def small_batch(model):
    rng = np.random.default_rng(5)
    return sample_batch(rng, model, n_interior=10)


@pytest.fixture
def fixed_prices():
    def prices_at(t):
        t = np.asarray(t, dtype=np.float64)
        return np.full(t.shape, 0.25), np.full(t.shape, 0.7)

    return prices_at
