"""Hand-built models whose drop accounting is known in closed form."""

import math

import numpy as np

from moepart.artifact_io import save_model, save_tokens
from moepart.moe_model import Expert, MoeConfig, MoeLayer

# Lower selection score per token group and group sizes: with
# t_major=0.1, t_minor=0.3 the groups are fully dropped, half dropped, kept.
GROUPS = ((0.05, 100), (0.20, 200), (0.45, 200))


def accounting_fixture(shared: int = 0):
    """Two experts, K=2. Token x=(a, 0) gets scores (sigmoid(a), 1-sigmoid(a))."""
    cfg = MoeConfig(d_model=2, d_ffn=2, num_experts=2, top_k=2, num_shared_experts=shared)
    gate = np.array([[1.0, 0.0], [0.0, 0.0]])
    rng = np.random.default_rng(0)

    def expert():
        return Expert(rng.standard_normal((2, 2)), rng.standard_normal((2, 2)), rng.standard_normal((2, 2)))

    layer = MoeLayer(cfg, gate, [expert(), expert()], [expert() for _ in range(shared)])
    rows = []
    for low, count in GROUPS:
        a = math.log((1 - low) / low)
        rows += [[a, 0.0]] * count
    return layer, np.array(rows)


def write_accounting_fixture(tmp_path, shared: int = 0):
    layer, x = accounting_fixture(shared)
    model_path, tok_path = tmp_path / f"acct{shared}.dsmoe", tmp_path / f"acct{shared}.bin"
    save_model(layer, model_path)
    save_tokens(x, tok_path)
    return model_path, tok_path
