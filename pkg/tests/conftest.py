import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from moepart.artifact_io import DEFAULT_CONFIG, generate_synthetic, synthetic_tokens
from moepart.moe_model import MoeConfig


@pytest.fixture
def small_config():
    return MoeConfig(d_model=4, d_ffn=6, num_experts=4, top_k=2)


@pytest.fixture
def small_layer(small_config):
    return generate_synthetic(small_config, seed=3)


@pytest.fixture
def default_layer():
    return generate_synthetic(DEFAULT_CONFIG, seed=0)


@pytest.fixture
def tokens():
    return synthetic_tokens(256, DEFAULT_CONFIG.d_model, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
