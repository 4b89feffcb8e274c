import numpy as np
import pytest

from wtal.model import ModelConfig, init_params


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_config(**overrides) -> ModelConfig:
    base = dict(num_classes=3, feature_dim=6, embed_dims=(5, 4),
                kernel_size=3, delta=5.0, temperatures=(1.0, 2.0, 5.0),
                use_background=True, dropout_rate=0.5)
    base.update(overrides)
    return ModelConfig(**base)


def tiny_model(seed=0, **overrides):
    config = tiny_config(**overrides)
    return config, init_params(config, seed=seed, dtype=np.float64)
