import numpy as np
import pytest

from compass.config import Config


@pytest.fixture
def tiny_cfg():
    """Small but fully exercised environment."""
    return Config.from_dict({
        "K": 20, "k_nn": 4, "M": 2, "N": 2, "B": 5,
        "d_e": 16, "d_pe": 4, "n_env": 2, "rollout_T": 4, "train_horizon": 4,
    })


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
