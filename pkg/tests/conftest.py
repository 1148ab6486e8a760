import numpy as np
import pytest

from bklv import ModelConfig, init_model

SMALL = ModelConfig(
    num_layers=2,
    num_q_heads=4,
    num_kv_heads=2,
    head_dim=8,
    d_model=32,
    d_ff=64,
    vocab_size=257,
    max_context=64,
    seed=3,
)


@pytest.fixture(scope="session")
def toy_model():
    """Default desk-scale model (the documented defaults), seed 7."""
    return init_model(ModelConfig(seed=7))


@pytest.fixture(scope="session")
def small_model():
    """A smaller model for oracle comparisons that loop in Python."""
    return init_model(SMALL)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
