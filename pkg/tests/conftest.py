import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hatnas.design_space import DesignSpace
from hatnas.task_data import generate_corpus

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def space():
    return DesignSpace()


@pytest.fixture(scope="session")
def micro_space():
    """Two encoder layers, up to two decoder layers; small enough for full gradchecks."""
    return DesignSpace(embed_choices=(8, 12), hidden_choices=(6, 10), head_choices=(1, 2),
                       decoder_layer_choices=(1, 2), encoder_layer_count=2, attend_span_choices=(1, 2),
                       qkv_dim=8, vocab_size=11, max_seq_len=10)


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_corpus("reverse", 200, 40, 40, 3, 6, 32, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
