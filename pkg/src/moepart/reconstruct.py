"""Neuron-importance profiling and major/minor expert reconstruction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .moe_model import Expert, MoeConfig, MoeLayer, RoutingDecision, major_size
from .tensor_core import as_matrix, matmul, swish
from .transform import PartitionSpec

METRICS = ("gate", "abs_gate", "gate_up", "abs_gate_up")
DEFAULT_METRIC = "abs_gate"


def canonical_metric(name: str) -> str:
    m = name.replace("-", "_").lower()
    if m not in METRICS:
        raise ConfigError(f"unknown importance metric {name!r}; choose from {', '.join(METRICS)}")
    return m


@dataclass
class ImportanceProfile:
    metric: str
    values: np.ndarray  # (num_experts, d_ffn), float64
    tokens: int
    routed_counts: np.ndarray = None
    layer_id: str = ""
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.routed_counts is None:
            self.routed_counts = np.zeros(self.values.shape[0], dtype=np.int64)

    def __add__(self, other: "ImportanceProfile") -> "ImportanceProfile":
        if self.metric != other.metric or self.values.shape != other.values.shape:
            raise ShapeError("cannot merge profiles with different metric or shape")
        return ImportanceProfile(
            self.metric,
            self.values + other.values,
            self.tokens + other.tokens,
            self.routed_counts + other.routed_counts,
            self.layer_id,
            dict(self.provenance),
        )

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "layer_id": self.layer_id,
            "calibration_tokens": self.tokens,
            "routed_counts": self.routed_counts.tolist(),
            "provenance": self.provenance,
            "values": self.values.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ImportanceProfile":
        return cls(
            d["metric"],
            np.asarray(d["values"], dtype=np.float64),
            int(d["calibration_tokens"]),
            np.asarray(d["routed_counts"], dtype=np.int64),
            d.get("layer_id", ""),
            d.get("provenance", {}),
        )


def neuron_statistic(expert: Expert, x: np.ndarray, metric: str) -> np.ndarray:
    """Per-token, per-neuron statistic, shape ``(tokens, d_ffn)``."""
    gate = swish(matmul(x, expert.w1))
    if metric in ("gate", "abs_gate"):
        stat = gate
    else:
        stat = gate * matmul(x, expert.w3)
    return np.abs(stat) if metric.startswith("abs") else stat


def profile_importance(
    layer: MoeLayer,
    calib: np.ndarray,
    routing: RoutingDecision,
    metric: str = DEFAULT_METRIC,
    layer_id: str = "",
    provenance: dict | None = None,
) -> ImportanceProfile:
    """Accumulate a neuron statistic over the tokens routed to each expert.

    Accumulation is unweighted by gate score and runs token by token in
    input order.
    """
    metric = canonical_metric(metric)
    cfg = layer.config
    if cfg.partition != 1:
        raise ConfigError("profile an unpartitioned layer")
    x = as_matrix(calib, dtype=layer.dtype)
    if x.shape[0] == 0:
        raise ShapeError("empty calibration set")
    if routing.num_tokens != x.shape[0] or routing.p != 1:
        raise ShapeError("routing does not correspond to the calibration tokens")
    values = np.zeros((cfg.num_experts, cfg.d_ffn), dtype=np.float64)
    counts = np.zeros(cfg.num_experts, dtype=np.int64)
    for e, expert in enumerate(layer.experts):
        toks = np.nonzero((routing.indices == e).any(axis=1))[0]
        counts[e] = toks.size
        if toks.size == 0:
            continue
        stat = neuron_statistic(expert, x[toks], metric).astype(np.float64)
        acc = values[e]
        for row in stat:
            acc += row
    return ImportanceProfile(metric, values, x.shape[0], counts, layer_id, dict(provenance or {}))


@dataclass(frozen=True)
class ReconstructionMap:
    """Per expert, a neuron permutation with the major block first."""

    permutations: tuple[np.ndarray, ...]
    d_ffn: int

    @property
    def major(self) -> int:
        return major_size(self.d_ffn)

    @property
    def num_experts(self) -> int:
        return len(self.permutations)

    def __post_init__(self):
        ref = np.arange(self.d_ffn)
        for perm in self.permutations:
            if not np.array_equal(np.sort(perm), ref):
                raise ShapeError("reconstruction map entry is not a permutation of 0..d_ffn-1")

    @classmethod
    def identity(cls, num_experts: int, d_ffn: int) -> "ReconstructionMap":
        return cls(tuple(np.arange(d_ffn) for _ in range(num_experts)), d_ffn)

    @classmethod
    def from_profile(cls, profile: ImportanceProfile) -> "ReconstructionMap":
        # Descending importance; stable sort keeps the lower index first on ties.
        perms = tuple(np.argsort(-row, kind="stable") for row in profile.values)
        return cls(perms, profile.values.shape[1])

    def to_dict(self) -> dict:
        return {"d_ffn": self.d_ffn, "permutations": [p.tolist() for p in self.permutations]}

    @classmethod
    def from_dict(cls, d: dict) -> "ReconstructionMap":
        return cls(tuple(np.asarray(p, dtype=np.int64) for p in d["permutations"]), int(d["d_ffn"]))


def reconstruct_experts(
    layer: MoeLayer, profile: ImportanceProfile
) -> tuple[MoeLayer, PartitionSpec, ReconstructionMap]:
    """Split every expert into a major (slot 0) and minor (slot 1) sub-expert.

    Weights are permuted and sliced but never scaled, so the result is
    routed like a partial transformation with P=2.
    """
    cfg = layer.config
    if cfg.partition != 1:
        raise ConfigError("layer is already partitioned")
    if profile.values.shape != (cfg.num_experts, cfg.d_ffn):
        raise ShapeError(
            f"profile shape {profile.values.shape} does not match layer ({cfg.num_experts}, {cfg.d_ffn})"
        )
    rmap = ReconstructionMap.from_profile(profile)
    h = rmap.major
    spec = PartitionSpec(2, "reconstruct", cfg.d_ffn, (h, cfg.d_ffn - h))
    experts = []
    for ex, perm in zip(layer.experts, rmap.permutations):
        experts.append(ex.take(perm[:h]))
        experts.append(ex.take(perm[h:]))
    new_cfg = MoeConfig(
        d_model=cfg.d_model,
        d_ffn=cfg.d_ffn,
        num_experts=cfg.num_experts,
        top_k=cfg.top_k,
        num_shared_experts=cfg.num_shared_experts,
        gate_prenormalized=cfg.gate_prenormalized,
        partition=2,
    )
    tag = f"reconstruct:{profile.metric}"
    out = MoeLayer(new_cfg, layer.gate, tuple(experts), layer.shared_experts, layer.lineage + (tag,))
    return out, spec, rmap
