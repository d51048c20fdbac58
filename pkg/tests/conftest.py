import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from melt.config import ModelConfig
from melt.looplm import LoopLM
from melt.melt import MeltLM

settings.register_profile("melt", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("melt")


@pytest.fixture
def tiny_cfg():
    return ModelConfig(n_layers=2, hidden_dim=64, n_heads=4, loops=3, vocab_size=32)


@pytest.fixture
def small_cfg():
    # small enough for finite differences over the whole model
    return ModelConfig(n_layers=2, hidden_dim=16, n_heads=2, loops=3, vocab_size=12, ffn_mult=2)


@pytest.fixture
def looplm(tiny_cfg):
    return LoopLM(tiny_cfg, seed=3)


@pytest.fixture
def melt_model(tiny_cfg):
    m = MeltLM(tiny_cfg, seed=3)
    # push gates away from their init so every loop's update matters
    rng = np.random.default_rng(0)
    for l in range(tiny_cfg.n_layers):
        m.p(f"gate.{l}.w_z").data = rng.normal(0, 0.3, (64, 64))
        m.p(f"gate.{l}.u_z").data = rng.normal(0, 0.3, (64, 64))
        m.p(f"gate.{l}.b_z").data = rng.normal(0, 1.0, 64)
    return m


@pytest.fixture
def tokens():
    return np.random.default_rng(7).integers(0, 32, (2, 10))
