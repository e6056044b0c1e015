"""MoE layer: softmax gate, Top-K routing, SwiGLU experts, shared experts."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, RoutingError, ShapeError
from .tensor_core import as_matrix, matmul, softmax_rows, swiglu_forward


@dataclass(frozen=True)
class MoeConfig:
    """Architecture hyperparameters of one MoE layer.

    ``partition`` is the number of stored sub-experts per gated expert. A
    value above 1 means the layer was produced by a partial transformation
    (or reconstruction): the gate still scores ``num_experts`` experts and
    routing must be replayed onto ``num_experts * partition`` sub-experts.
    ``d_ffn`` always refers to the intermediate size of a gated expert.
    """

    d_model: int
    d_ffn: int
    num_experts: int
    top_k: int
    num_shared_experts: int = 0
    gate_prenormalized: bool = False
    partition: int = 1

    def __post_init__(self):
        for name in ("d_model", "d_ffn", "num_experts", "top_k", "partition"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.num_shared_experts < 0:
            raise ConfigError("num_shared_experts must be >= 0")
        if self.top_k > self.num_experts:
            raise ConfigError(f"top_k={self.top_k} exceeds num_experts={self.num_experts}")
        if self.d_ffn < 2:
            raise ConfigError("d_ffn must be at least 2 (major/minor split)")

    @property
    def num_stored_experts(self) -> int:
        return self.num_experts * self.partition

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "d_ffn": self.d_ffn,
            "num_experts": self.num_experts,
            "top_k": self.top_k,
            "num_shared_experts": self.num_shared_experts,
            "gate_prenormalized": self.gate_prenormalized,
            "partition": self.partition,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MoeConfig":
        return cls(
            d_model=int(d["d_model"]),
            d_ffn=int(d["d_ffn"]),
            num_experts=int(d["num_experts"]),
            top_k=int(d["top_k"]),
            num_shared_experts=int(d.get("num_shared_experts", 0)),
            gate_prenormalized=bool(d.get("gate_prenormalized", False)),
            partition=int(d.get("partition", 1)),
        )


@dataclass(frozen=True)
class Expert:
    """SwiGLU weights: gate projection ``w1``, up projection ``w3``, down projection ``w2``."""

    w1: np.ndarray
    w3: np.ndarray
    w2: np.ndarray

    def __post_init__(self):
        if self.w1.ndim != 2 or self.w1.shape != self.w3.shape:
            raise ShapeError(f"W1 {self.w1.shape} / W3 {self.w3.shape} mismatch")
        if self.w2.shape != (self.w1.shape[1], self.w1.shape[0]):
            raise ShapeError(f"W2 {self.w2.shape} does not match W1 {self.w1.shape}")

    @property
    def d_model(self) -> int:
        return self.w1.shape[0]

    @property
    def d_ffn(self) -> int:
        return self.w1.shape[1]

    def take(self, neurons) -> "Expert":
        """Sub-expert holding the given neuron positions, in the given order."""
        neurons = np.asarray(neurons, dtype=np.int64)
        return Expert(
            np.ascontiguousarray(self.w1[:, neurons]),
            np.ascontiguousarray(self.w3[:, neurons]),
            np.ascontiguousarray(self.w2[neurons, :]),
        )

    def major_half(self) -> "Expert":
        return self.take(np.arange(major_size(self.d_ffn)))

    def forward(self, x: np.ndarray) -> np.ndarray:
        return swiglu_forward(x, self.w1, self.w3, self.w2)

    def num_params(self) -> int:
        return self.w1.size + self.w3.size + self.w2.size


def major_size(d_ffn: int) -> int:
    return math.ceil(d_ffn / 2)


@dataclass(frozen=True)
class MoeLayer:
    config: MoeConfig
    gate: np.ndarray
    experts: tuple[Expert, ...]
    shared_experts: tuple[Expert, ...] = ()
    lineage: tuple[str, ...] = ()

    def __post_init__(self):
        cfg = self.config
        object.__setattr__(self, "experts", tuple(self.experts))
        object.__setattr__(self, "shared_experts", tuple(self.shared_experts))
        object.__setattr__(self, "lineage", tuple(self.lineage))
        if self.gate.shape != (cfg.d_model, cfg.num_experts):
            raise ShapeError(
                f"gate shape {self.gate.shape} != ({cfg.d_model}, {cfg.num_experts})"
            )
        if len(self.experts) != cfg.num_stored_experts:
            raise ShapeError(
                f"expected {cfg.num_stored_experts} stored experts, got {len(self.experts)}"
            )
        if len(self.shared_experts) != cfg.num_shared_experts:
            raise ShapeError(
                f"expected {cfg.num_shared_experts} shared experts, got {len(self.shared_experts)}"
            )
        for ex in self.experts + self.shared_experts:
            if ex.d_model != cfg.d_model:
                raise ShapeError(f"expert d_model {ex.d_model} != {cfg.d_model}")
            if ex.w1.dtype != self.gate.dtype:
                raise ShapeError("all tensors of a layer must share one dtype")
        for e in range(cfg.num_experts):
            group = self.experts[e * cfg.partition : (e + 1) * cfg.partition]
            if sum(s.d_ffn for s in group) != cfg.d_ffn:
                raise ShapeError(f"sub-experts of expert {e} do not add up to d_ffn={cfg.d_ffn}")

    @property
    def dtype(self) -> np.dtype:
        return self.gate.dtype

    def with_lineage(self, tag: str) -> "MoeLayer":
        return replace(self, lineage=self.lineage + (tag,))

    def astype(self, dtype) -> "MoeLayer":
        def cast(ex: Expert) -> Expert:
            return Expert(ex.w1.astype(dtype), ex.w3.astype(dtype), ex.w2.astype(dtype))

        return replace(
            self,
            gate=self.gate.astype(dtype),
            experts=tuple(cast(e) for e in self.experts),
            shared_experts=tuple(cast(e) for e in self.shared_experts),
        )


@dataclass
class RoutingDecision:
    """Per-token expert selections.

    Arrays are ``(tokens, slots)``. For a freshly routed layer ``slots == k``;
    after replay onto a partitioned layer ``slots == k * p`` and slot ``j``
    belongs to original selection ``j % k`` (all ``+0`` copies first, then
    all ``+1`` copies, ...).
    """

    indices: np.ndarray
    raw: np.ndarray
    normalized: np.ndarray | None = None
    fraction: np.ndarray | None = None
    k: int = 0
    p: int = 1

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.raw = np.asarray(self.raw)
        if self.indices.ndim != 2 or self.indices.shape != self.raw.shape:
            raise RoutingError(f"indices {self.indices.shape} / scores {self.raw.shape} mismatch")
        if self.k == 0:
            self.k = self.indices.shape[1] // self.p
        if self.k * self.p != self.indices.shape[1]:
            raise RoutingError(f"{self.indices.shape[1]} slots is not k={self.k} x p={self.p}")
        if self.fraction is None:
            self.fraction = np.ones(self.indices.shape, dtype=np.float64)
        if self.normalized is not None and self.normalized.shape != self.indices.shape:
            raise RoutingError("normalized score shape mismatch")

    @property
    def num_tokens(self) -> int:
        return self.indices.shape[0]

    @property
    def slots(self) -> int:
        return self.indices.shape[1]

    def group_of_slot(self) -> np.ndarray:
        """Original-selection id of every slot."""
        return np.arange(self.slots) % self.k

    def copy(self, **changes) -> "RoutingDecision":
        fields = dict(
            indices=self.indices.copy(),
            raw=self.raw.copy(),
            normalized=None if self.normalized is None else self.normalized.copy(),
            fraction=self.fraction.copy(),
            k=self.k,
            p=self.p,
        )
        fields.update(changes)
        return RoutingDecision(**fields)


def gate_scores(layer: MoeLayer, x: np.ndarray) -> np.ndarray:
    x = as_matrix(x)
    if x.shape[1] != layer.config.d_model:
        raise ShapeError(f"tokens {x.shape} vs d_model={layer.config.d_model}")
    return softmax_rows(matmul(x, layer.gate))


def topk_route(scores: np.ndarray, k: int) -> RoutingDecision:
    """Top-k per row; ties go to the lower expert index."""
    scores = np.asarray(scores)
    if scores.ndim != 2:
        raise ShapeError(f"scores must be 2-D, got {scores.shape}")
    if not 1 <= k <= scores.shape[1]:
        raise RoutingError(f"k={k} out of range for {scores.shape[1]} experts")
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    raw = np.take_along_axis(scores, order, axis=1)
    return RoutingDecision(indices=order, raw=raw, k=k, p=1)


def route(layer: MoeLayer, x: np.ndarray) -> RoutingDecision:
    """Gate, Top-K, and (for partitioned layers) replay onto sub-experts."""
    from .transform import replay_routing

    r = topk_route(gate_scores(layer, x), layer.config.top_k)
    if layer.config.partition > 1:
        r = replay_routing(r, layer.config.top_k, layer.config.partition)
    return r


def _selected_output(expert: Expert, x: np.ndarray, frac: float) -> np.ndarray:
    if frac == 1.0:
        return expert.forward(x)
    if frac == 0.5:
        return expert.major_half().forward(x)
    raise RoutingError(f"unsupported compute fraction {frac}")


def moe_forward(layer: MoeLayer, x: np.ndarray, routing: RoutingDecision) -> np.ndarray:
    """Weighted sum of selected expert outputs plus ungated shared experts.

    Weights are the raw gate scores. A compute fraction of 0.5 evaluates only
    the first ``ceil(d_ffn/2)`` neurons of the stored expert; 0.0 skips it.
    """
    x = as_matrix(x, dtype=layer.dtype)
    if routing.num_tokens != x.shape[0]:
        raise RoutingError(f"routing covers {routing.num_tokens} tokens, input has {x.shape[0]}")
    n_stored = len(layer.experts)
    if routing.indices.size and (routing.indices.min() < 0 or routing.indices.max() >= n_stored):
        raise RoutingError("routing references an expert the layer does not store")
    bad = ~np.isin(routing.fraction, (0.0, 0.5, 1.0))
    if bad.any():
        raise RoutingError(f"unsupported compute fraction {routing.fraction[bad][0]}")
    y = np.zeros((x.shape[0], layer.config.d_model), dtype=layer.dtype)
    for e, expert in enumerate(layer.experts):
        tok, slot = np.nonzero(routing.indices == e)
        if tok.size == 0:
            continue
        fracs = routing.fraction[tok, slot]
        for frac in (1.0, 0.5):
            sel = fracs == frac
            if not sel.any():
                continue
            t_sel, s_sel = tok[sel], slot[sel]
            out = _selected_output(expert, x[t_sel], frac)
            w = routing.raw[t_sel, s_sel].astype(layer.dtype)[:, None]
            np.add.at(y, t_sel, w * out)
    for shared in layer.shared_experts:
        y += shared.forward(x)
    return y


def layer_forward(layer: MoeLayer, x: np.ndarray) -> np.ndarray:
    """Route and evaluate with no dropping."""
    return moe_forward(layer, x, route(layer, x))


@dataclass
class MoeModel:
    """A stack of MoE layers joined by residual connections.

    ``specs`` and ``recon_maps`` hold, per layer, the ``PartitionSpec`` and
    ``ReconstructionMap`` of partitioned layers (``None`` otherwise).
    """

    layers: list[MoeLayer] = field(default_factory=list)
    specs: list = field(default_factory=list)
    recon_maps: list = field(default_factory=list)

    def __post_init__(self):
        n = len(self.layers)
        self.specs = list(self.specs) or [None] * n
        self.recon_maps = list(self.recon_maps) or [None] * n
        if len(self.specs) != n or len(self.recon_maps) != n:
            raise ShapeError("per-layer metadata length does not match the layer count")

    @property
    def dtype(self) -> np.dtype:
        return self.layers[0].dtype

    def forward(self, x: np.ndarray, routings: list[RoutingDecision] | None = None) -> np.ndarray:
        h = as_matrix(x, dtype=self.dtype)
        for i, layer in enumerate(self.layers):
            r = routings[i] if routings is not None else route(layer, h)
            h = h + moe_forward(layer, h, r)
        return h
