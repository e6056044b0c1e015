"""Expert partition: complete and partial transformations, routing replay,
reversal and output-equivalence checks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, RoutingError, ShapeError
from .moe_model import Expert, MoeConfig, MoeLayer, RoutingDecision, moe_forward, route
from .tensor_core import as_matrix


@dataclass(frozen=True)
class PartitionSpec:
    """How each gated expert was split into ``factor`` stored sub-experts.

    ``sizes[i]`` is the neuron count of slot ``i`` (identical for every
    expert). ``chunks`` gives the contiguous ``(start, stop)`` range of
    original neuron positions per slot; for reconstructed layers positions
    refer to the importance-permuted order.
    """

    factor: int
    mode: str
    d_ffn: int
    sizes: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if self.factor < 2:
            raise ConfigError(f"partition factor must be >= 2, got {self.factor}")
        if self.mode not in ("complete", "partial", "reconstruct"):
            raise ConfigError(f"unknown partition mode {self.mode!r}")
        if not self.sizes:
            if self.d_ffn % self.factor:
                raise ConfigError(f"d_ffn={self.d_ffn} not divisible by P={self.factor}")
            object.__setattr__(self, "sizes", (self.d_ffn // self.factor,) * self.factor)
        if len(self.sizes) != self.factor or sum(self.sizes) != self.d_ffn:
            raise ConfigError(f"sizes {self.sizes} do not partition d_ffn={self.d_ffn}")

    @property
    def chunks(self) -> list[tuple[int, int]]:
        bounds = np.concatenate([[0], np.cumsum(self.sizes)])
        return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]

    def to_dict(self) -> dict:
        return {"factor": self.factor, "mode": self.mode, "d_ffn": self.d_ffn, "sizes": list(self.sizes)}

    @classmethod
    def from_dict(cls, d: dict) -> "PartitionSpec":
        return cls(int(d["factor"]), d["mode"], int(d["d_ffn"]), tuple(int(s) for s in d["sizes"]))


def split_expert(expert: Expert, spec: PartitionSpec) -> list[Expert]:
    return [expert.take(np.arange(a, b)) for a, b in spec.chunks]


def _check_splittable(layer: MoeLayer, p: int) -> PartitionSpec:
    if p < 2:
        raise ConfigError(f"partition factor must be >= 2, got {p}")
    if layer.config.partition != 1:
        raise ConfigError("layer is already partitioned; reverse it first")
    if layer.config.d_ffn % p:
        raise ConfigError(f"d_ffn={layer.config.d_ffn} is not divisible by P={p}")
    return PartitionSpec(p, "partial", layer.config.d_ffn)


def complete_transform(layer: MoeLayer, p: int) -> MoeLayer:
    """E experts -> E*P experts with a repeated gate and W2 scaled by P.

    The result is an ordinary layer: Top-(K*P) over the repeated gate picks
    all P copies of each originally selected expert, every copy scored at
    1/P of the original, and the P-fold W2 scaling restores the output.
    """
    spec = _check_splittable(layer, p)
    cfg = layer.config
    gate = np.ascontiguousarray(np.repeat(layer.gate, p, axis=1))
    scale = layer.dtype.type(p)
    experts = []
    for ex in layer.experts:
        for sub in split_expert(ex, spec):
            experts.append(Expert(sub.w1, sub.w3, np.ascontiguousarray(sub.w2 * scale)))
    new_cfg = MoeConfig(
        d_model=cfg.d_model,
        d_ffn=cfg.d_ffn // p,
        num_experts=cfg.num_experts * p,
        top_k=cfg.top_k * p,
        num_shared_experts=cfg.num_shared_experts,
        gate_prenormalized=cfg.gate_prenormalized,
    )
    return MoeLayer(new_cfg, gate, tuple(experts), layer.shared_experts, layer.lineage + (f"complete:P={p}",))


def partial_transform(layer: MoeLayer, p: int) -> tuple[MoeLayer, PartitionSpec]:
    """Split experts into unscaled contiguous slices; the gate is untouched."""
    spec = _check_splittable(layer, p)
    cfg = layer.config
    experts = [sub for ex in layer.experts for sub in split_expert(ex, spec)]
    new_cfg = MoeConfig(
        d_model=cfg.d_model,
        d_ffn=cfg.d_ffn,
        num_experts=cfg.num_experts,
        top_k=cfg.top_k,
        num_shared_experts=cfg.num_shared_experts,
        gate_prenormalized=cfg.gate_prenormalized,
        partition=p,
    )
    out = MoeLayer(new_cfg, layer.gate, tuple(experts), layer.shared_experts, layer.lineage + (f"partial:P={p}",))
    return out, spec


def replay_routing(routing: RoutingDecision, k: int, p: int) -> RoutingDecision:
    """Map Top-K selections onto P sub-experts each.

    Index ``i`` becomes ``i*P + q`` for ``q = 0..P-1``; the output lists all
    ``q = 0`` copies for the K selections first, then ``q = 1``, and so on.
    Every copy carries the original raw (and normalized) score.
    """
    if routing.p != 1:
        raise RoutingError("routing has already been replayed")
    if routing.slots != k:
        raise RoutingError(f"routing has {routing.slots} selections per token, expected k={k}")
    if p < 1:
        raise ConfigError(f"P must be >= 1, got {p}")
    if p == 1:
        return routing.copy()
    idx = np.concatenate([routing.indices * p + q for q in range(p)], axis=1)
    raw = np.tile(routing.raw, (1, p))
    norm = None if routing.normalized is None else np.tile(routing.normalized, (1, p))
    frac = np.tile(routing.fraction, (1, p))
    return RoutingDecision(indices=idx, raw=raw, normalized=norm, fraction=frac, k=k, p=p)


def reverse_partial(layer: MoeLayer, spec: PartitionSpec, recon_map=None) -> MoeLayer:
    """Concatenate sub-experts back into gated-expert shape.

    Without ``recon_map`` the neurons of a reconstructed layer stay in their
    importance order (output-equivalent). With it, the original neuron order
    is restored as well, which makes the round trip bit-exact.
    """
    cfg = layer.config
    if cfg.partition != spec.factor or cfg.d_ffn != spec.d_ffn:
        raise ShapeError(
            f"layer (partition={cfg.partition}, d_ffn={cfg.d_ffn}) does not match "
            f"spec (P={spec.factor}, d_ffn={spec.d_ffn})"
        )
    experts = []
    for e in range(cfg.num_experts):
        group = layer.experts[e * spec.factor : (e + 1) * spec.factor]
        if tuple(s.d_ffn for s in group) != spec.sizes:
            raise ShapeError(f"expert {e} sub-expert sizes do not match the spec")
        w1 = np.concatenate([s.w1 for s in group], axis=1)
        w3 = np.concatenate([s.w3 for s in group], axis=1)
        w2 = np.concatenate([s.w2 for s in group], axis=0)
        merged = Expert(w1, w3, w2)
        if recon_map is not None:
            merged = merged.take(np.argsort(recon_map.permutations[e], kind="stable"))
        experts.append(merged)
    new_cfg = MoeConfig(
        d_model=cfg.d_model,
        d_ffn=cfg.d_ffn,
        num_experts=cfg.num_experts,
        top_k=cfg.top_k,
        num_shared_experts=cfg.num_shared_experts,
        gate_prenormalized=cfg.gate_prenormalized,
    )
    return MoeLayer(new_cfg, layer.gate, tuple(experts), layer.shared_experts, layer.lineage + ("reverse",))


@dataclass(frozen=True)
class EquivalenceReport:
    max_abs: float
    max_rel: float
    tol: float
    tokens: int

    @property
    def passed(self) -> bool:
        return self.max_rel <= self.tol


def output_difference(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Max absolute and max relative difference of two output matrices.

    Relative error of an element is taken against the largest magnitude in
    that token's reference row, so near-zero elements cannot inflate it.
    """
    if a.shape != b.shape:
        raise ShapeError(f"output shapes differ: {a.shape} vs {b.shape}")
    diff = np.abs(a.astype(np.float64) - b.astype(np.float64))
    if diff.size == 0:
        return 0.0, 0.0
    scale = np.abs(b.astype(np.float64)).max(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(diff == 0, 0.0, diff / scale)
    return float(diff.max()), float(rel.max())


def verify_equivalence(a: MoeLayer, b: MoeLayer, tokens: np.ndarray, tol: float) -> EquivalenceReport:
    """Forward both layers (each with its own routing mode) and compare."""
    if a.config.d_model != b.config.d_model:
        raise ShapeError(f"d_model differs: {a.config.d_model} vs {b.config.d_model}")
    x = as_matrix(tokens)
    ya = moe_forward(a, x, route(a, x.astype(a.dtype)))
    yb = moe_forward(b, x, route(b, x.astype(b.dtype)))
    max_abs, max_rel = output_difference(ya, yb)
    return EquivalenceReport(max_abs, max_rel, tol, x.shape[0])
