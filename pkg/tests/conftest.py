import numpy as np
import pytest

from evomoe.model import ModelConfig, gen_random_model


@pytest.fixture
def tiny_config():
    return ModelConfig(d_model=16, d_ffn=32, n_layers=2, n_experts=4, top_k=2,
                       vocab_size=64, max_seq_len=32)


@pytest.fixture
def tiny_model(tiny_config):
    return gen_random_model(tiny_config, seed=0)


@pytest.fixture
def tiny_tokens():
    rng = np.random.default_rng(100)
    return rng.integers(0, 64, size=(8, 8), dtype=np.int64)
