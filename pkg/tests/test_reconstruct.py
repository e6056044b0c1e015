import numpy as np
import pytest

import oracles
from moepart.artifact_io import generate_synthetic, synthetic_tokens
from moepart.errors import ConfigError, ShapeError
from moepart.moe_model import MoeConfig, route
from moepart.reconstruct import (
    METRICS,
    ImportanceProfile,
    ReconstructionMap,
    canonical_metric,
    profile_importance,
    reconstruct_experts,
)
from moepart.transform import reverse_partial, verify_equivalence

CFG = MoeConfig(d_model=6, d_ffn=10, num_experts=4, top_k=2)


@pytest.fixture
def layer():
    return generate_synthetic(CFG, seed=21)


@pytest.fixture
def calib():
    return synthetic_tokens(40, 6, seed=22)


@pytest.mark.parametrize("metric", METRICS)
def test_profile_matches_scalar_oracle(layer, calib, metric):
    r = route(layer, calib)
    prof = profile_importance(layer, calib, r, metric)
    for e, ex in enumerate(layer.experts):
        toks = [list(calib[t]) for t in range(calib.shape[0]) if e in r.indices[t]]
        assert prof.routed_counts[e] == len(toks)
        want = oracles.importance(toks, ex.w1.tolist(), ex.w3.tolist(), metric)
        assert np.allclose(prof.values[e], want, rtol=1e-12, atol=1e-14)


def test_zero_calibration_gives_zero(layer):
    x = np.zeros((5, 6))
    for metric in METRICS:
        assert np.all(profile_importance(layer, x, route(layer, x), metric).values == 0)


def test_abs_dominates_signed(layer, calib):
    r = route(layer, calib)
    signed = profile_importance(layer, calib, r, "gate").values
    absolute = profile_importance(layer, calib, r, "abs_gate").values
    assert np.all(absolute >= np.abs(signed) - 1e-12)


def test_profiles_add_over_disjoint_sets(layer, calib):
    a, b = calib[:15], calib[15:]
    whole = profile_importance(layer, calib, route(layer, calib))
    merged = profile_importance(layer, a, route(layer, a)) + profile_importance(layer, b, route(layer, b))
    assert np.allclose(merged.values, whole.values, rtol=1e-12)
    assert merged.tokens == whole.tokens
    assert np.array_equal(merged.routed_counts, whole.routed_counts)


def test_map_from_profile_orders():
    flat = ImportanceProfile("gate", np.ones((2, 6)), 1)
    assert all(p.tolist() == list(range(6)) for p in ReconstructionMap.from_profile(flat).permutations)
    rising = ImportanceProfile("gate", np.tile(np.arange(6.0), (1, 1)), 1)
    assert ReconstructionMap.from_profile(rising).permutations[0].tolist() == [5, 4, 3, 2, 1, 0]
    with pytest.raises(ShapeError):
        ReconstructionMap((np.array([0, 0, 1]),), 3)


def test_major_block_holds_top_neurons(layer, calib):
    prof = profile_importance(layer, calib, route(layer, calib))
    rec, spec, rmap = reconstruct_experts(layer, prof)
    assert spec.sizes == (5, 5) and rec.config.partition == 2
    for e in range(CFG.num_experts):
        major = set(rmap.permutations[e][:5].tolist())
        top = set(np.argsort(-prof.values[e], kind="stable")[:5].tolist())
        assert major == top
        assert np.array_equal(rec.experts[2 * e].w1, layer.experts[e].w1[:, rmap.permutations[e][:5]])


def test_odd_d_ffn_major_is_larger():
    cfg = MoeConfig(d_model=4, d_ffn=7, num_experts=2, top_k=1)
    lyr = generate_synthetic(cfg, seed=1)
    x = synthetic_tokens(10, 4, seed=2)
    rec, spec, _ = reconstruct_experts(lyr, profile_importance(lyr, x, route(lyr, x)))
    assert spec.sizes == (4, 3)
    assert rec.experts[0].d_ffn == 4 and rec.experts[1].d_ffn == 3


def test_reconstruction_equivalent_and_reversible(layer, calib):
    x = synthetic_tokens(100, 6, seed=3)
    rec, spec, rmap = reconstruct_experts(layer, profile_importance(layer, calib, route(layer, calib)))
    assert verify_equivalence(layer, rec, x, 1e-10).passed
    back = reverse_partial(rec, spec, rmap)
    for a, b in zip(back.experts, layer.experts):
        assert np.array_equal(a.w1, b.w1) and np.array_equal(a.w2, b.w2)


def test_errors(layer, calib):
    with pytest.raises(ConfigError):
        canonical_metric("l2")
    assert canonical_metric("abs-gate-up") == "abs_gate_up"
    with pytest.raises(ShapeError):
        profile_importance(layer, calib[:0], route(layer, calib[:0]))
    with pytest.raises(ShapeError):
        reconstruct_experts(layer, ImportanceProfile("gate", np.zeros((3, 10)), 1))


def test_profile_serialization_roundtrip(layer, calib):
    prof = profile_importance(layer, calib, route(layer, calib), provenance={"seed": 22})
    back = ImportanceProfile.from_dict(prof.to_dict())
    assert np.array_equal(back.values, prof.values) and back.provenance == {"seed": 22}
    rmap = ReconstructionMap.from_profile(prof)
    assert all(np.array_equal(a, b) for a, b in zip(ReconstructionMap.from_dict(rmap.to_dict()).permutations, rmap.permutations))
