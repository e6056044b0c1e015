import numpy as np
import pytest

from moepart.artifact_io import generate_synthetic, synthetic_tokens
from moepart.errors import ConfigError, ShapeError
from moepart.moe_model import MoeConfig, MoeLayer, gate_scores, layer_forward, moe_forward, route, topk_route
from moepart.transform import (
    PartitionSpec,
    complete_transform,
    output_difference,
    partial_transform,
    replay_routing,
    reverse_partial,
    verify_equivalence,
)

CFG = MoeConfig(d_model=8, d_ffn=12, num_experts=4, top_k=2)


@pytest.fixture
def layer():
    return generate_synthetic(CFG, seed=7)


@pytest.fixture
def x():
    return synthetic_tokens(64, 8, seed=8)


def test_replay_hand_example():
    r = topk_route(np.array([[0.0, 0.3, 0.0, 0.5]]), 2)
    assert r.indices.tolist() == [[3, 1]]
    out = replay_routing(r, 2, 2)
    assert out.indices.tolist() == [[6, 2, 7, 3]]
    assert out.raw.tolist() == [[0.5, 0.3, 0.5, 0.3]]
    assert out.group_of_slot().tolist() == [0, 1, 0, 1]


def test_replay_p1_is_identity_and_double_replay_rejected():
    r = topk_route(np.array([[0.1, 0.6, 0.3]]), 2)
    assert replay_routing(r, 2, 1).indices.tolist() == r.indices.tolist()
    with pytest.raises(Exception):
        replay_routing(replay_routing(r, 2, 2), 2, 2)


@pytest.mark.parametrize("p", [2, 4])
def test_complete_scores_are_repeated_and_split(layer, x, p):
    big = complete_transform(layer, p)
    s, s_big = gate_scores(layer, x), gate_scores(big, x)
    for e in range(CFG.num_experts):
        for q in range(p):
            assert np.allclose(s_big[:, e * p + q], s[:, e] / p, rtol=1e-13)
    # All P copies of each selected expert are picked.
    r, r_big = route(layer, x), route(big, x)
    want = np.sort(np.concatenate([r.indices * p + q for q in range(p)], axis=1), axis=1)
    assert np.array_equal(np.sort(r_big.indices, axis=1), want)


@pytest.mark.parametrize("p", [2, 4])
@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-10), (np.float32, 1e-4)])
def test_complete_and_partial_equivalence(layer, x, p, dtype, tol):
    base = layer.astype(dtype)
    assert verify_equivalence(base, complete_transform(base, p), x, tol).passed
    part, _ = partial_transform(base, p)
    assert verify_equivalence(base, part, x, tol).passed


def test_sub_expert_sum_identity(layer, x):
    """Sum over the P slices of an expert reproduces the expert output."""
    part, _ = partial_transform(layer, 2)
    for e, ex in enumerate(layer.experts):
        y = ex.forward(x)
        y_sum = part.experts[2 * e].forward(x) + part.experts[2 * e + 1].forward(x)
        assert output_difference(y_sum, y)[1] <= 1e-12


def test_partial_layout_and_params(layer):
    part, spec = partial_transform(layer, 2)
    assert part.config.num_stored_experts == 8 and part.config.partition == 2
    assert np.array_equal(part.gate, layer.gate)
    assert np.array_equal(part.experts[3].w1, layer.experts[1].w1[:, 6:])
    assert np.array_equal(part.experts[2].w2, layer.experts[1].w2[:6])
    assert spec.chunks == [(0, 6), (6, 12)]
    count = lambda lyr: sum(ex.num_params() for ex in lyr.experts)
    assert count(part) == count(layer)
    big = complete_transform(layer, 2)
    assert count(big) == count(layer)
    assert big.gate.size == 2 * layer.gate.size
    assert np.array_equal(big.experts[3].w2, 2.0 * layer.experts[1].w2[6:])


def test_reverse_partial_bit_exact(layer):
    for p in (2, 3, 4):
        part, spec = partial_transform(layer, p)
        back = reverse_partial(part, spec)
        for a, b in zip(back.experts, layer.experts):
            assert np.array_equal(a.w1, b.w1) and np.array_equal(a.w3, b.w3) and np.array_equal(a.w2, b.w2)


def test_transform_errors(layer):
    with pytest.raises(ConfigError):
        partial_transform(layer, 1)
    with pytest.raises(ConfigError):
        complete_transform(layer, 5)
    part, spec = partial_transform(layer, 2)
    with pytest.raises(ConfigError):
        partial_transform(part, 2)
    with pytest.raises(ShapeError):
        reverse_partial(part, PartitionSpec(4, "partial", 12))


def test_perturbation_is_detected(layer, x):
    part, _ = partial_transform(layer, 2)
    experts = list(part.experts)
    ex = experts[0]
    w2 = ex.w2.copy()
    w2[0, 0] += 1.0
    experts[0] = type(ex)(ex.w1, ex.w3, w2)
    broken = MoeLayer(part.config, part.gate, experts)
    assert not verify_equivalence(layer, broken, x, 1e-10).passed


def test_output_difference_row_scaled():
    a = np.array([[1.0, 1e-20], [0.0, 0.0]])
    b = np.array([[1.0, 0.0], [0.0, 0.0]])
    abs_err, rel = output_difference(a, b)
    assert abs_err == 1e-20 and rel == 1e-20
    with pytest.raises(ShapeError):
        output_difference(a, b[:1])


def test_partial_forward_with_explicit_replay(layer, x):
    part, _ = partial_transform(layer, 4)
    r = replay_routing(topk_route(gate_scores(layer, x), 2), 2, 4)
    assert output_difference(moe_forward(part, x, r), layer_forward(layer, x))[1] <= 1e-12


def test_two_expert_layout_becomes_four():
    cfg = MoeConfig(d_model=4, d_ffn=6, num_experts=2, top_k=1)
    lyr = generate_synthetic(cfg, seed=2)
    part, _ = partial_transform(lyr, 2)
    for e in range(2):
        assert np.array_equal(np.hstack([part.experts[2 * e].w1, part.experts[2 * e + 1].w1]), lyr.experts[e].w1)
    r = replay_routing(topk_route(np.array([[0.3, 0.7], [0.9, 0.1]]), 1), 1, 2)
    assert r.indices.tolist() == [[2, 3], [0, 1]]
