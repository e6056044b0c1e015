"""Token-expert computation dropping (single and dual threshold),
drop-rate accounting and gate-score distribution analysis."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, RoutingError, ShapeError
from .moe_model import MoeConfig, MoeLayer, RoutingDecision, gate_scores, moe_forward, route, topk_route
from .reconstruct import ReconstructionMap
from .tensor_core import as_matrix

DEFAULT_BAND = 0.01
POLICY_KINDS = ("none", "one_threshold", "two_threshold")


def dual_band(t: float, band: float = DEFAULT_BAND) -> tuple[float, float]:
    """``(t_major, t_minor)`` centred on ``t``.

    The half-width shrinks to ``t`` below ``band`` so that ``t = 0`` drops
    nothing and both edges stay non-decreasing in ``t``.
    """
    half = min(band, t)
    return t - half, t + half


@dataclass(frozen=True)
class DropPolicy:
    kind: str = "none"
    t_drop: float = 0.0
    t_major: float = 0.0
    t_minor: float = 0.0
    keep_top1: bool = True
    normalize: bool | None = None  # None: normalise unless the gate is prenormalised

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ConfigError(f"unknown drop policy {self.kind!r}")
        if self.kind == "two_threshold" and self.t_major > self.t_minor:
            raise ConfigError(f"t_major={self.t_major} exceeds t_minor={self.t_minor}")
        if min(self.t_drop, self.t_major, self.t_minor) < 0:
            raise ConfigError("thresholds must be non-negative")

    @classmethod
    def none(cls) -> "DropPolicy":
        return cls("none")

    @classmethod
    def one_threshold(cls, t: float, keep_top1: bool = True) -> "DropPolicy":
        return cls("one_threshold", t_drop=t, t_major=t, t_minor=t, keep_top1=keep_top1)

    @classmethod
    def two_threshold(
        cls, t: float, t_major: float | None = None, t_minor: float | None = None, keep_top1: bool = True
    ) -> "DropPolicy":
        lo, hi = dual_band(t)
        return cls(
            "two_threshold",
            t_drop=t,
            t_major=lo if t_major is None else t_major,
            t_minor=hi if t_minor is None else t_minor,
            keep_top1=keep_top1,
        )

    @property
    def band(self) -> float:
        return (self.t_minor - self.t_major) / 2

    def should_normalize(self, config: MoeConfig) -> bool:
        return (not config.gate_prenormalized) if self.normalize is None else self.normalize

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "t_drop": self.t_drop,
            "t_major": self.t_major,
            "t_minor": self.t_minor,
            "keep_top1": self.keep_top1,
            "normalize": self.normalize,
        }


def normalize_topk(routing: RoutingDecision, normalize: bool = True) -> RoutingDecision:
    """Attach normalised scores: each raw score over its token's selection sum.

    For replayed routing the sum runs over original selections only. With
    ``normalize=False`` (prenormalised gates) raw scores are copied.
    """
    out = routing.copy()
    if not normalize:
        out.normalized = routing.raw.copy()
        return out
    base = routing.raw[:, : routing.k]
    if np.any(base < 0):
        raise RoutingError("raw gate scores must be non-negative")
    total = base.sum(axis=1, keepdims=True)
    if np.any(total <= 0):
        raise RoutingError("zero-sum gate scores cannot be normalised")
    out.normalized = np.tile(base / total, (1, routing.p))
    return out


def _require_normalized(routing: RoutingDecision) -> np.ndarray:
    if routing.normalized is None:
        raise RoutingError("routing carries no normalised scores; call normalize_topk first")
    return routing.normalized[:, : routing.k]


def _top1_mask(norm: np.ndarray) -> np.ndarray:
    # argmax returns the first maximum, i.e. the lower slot on ties.
    mask = np.zeros(norm.shape, dtype=bool)
    mask[np.arange(norm.shape[0]), np.argmax(norm, axis=1)] = True
    return mask


def apply_one_threshold(routing: RoutingDecision, t_drop, keep_top1: bool = True) -> RoutingDecision:
    """Single-threshold drop with a scalar or per-selection ``(tokens, k)`` threshold."""
    norm = _require_normalized(routing)
    keep = norm >= np.broadcast_to(np.asarray(t_drop, dtype=np.float64), norm.shape)
    if keep_top1 and norm.shape[0]:
        keep |= _top1_mask(norm)
    frac = np.where(keep, 1.0, 0.0)
    out = routing.copy()
    out.fraction = np.tile(frac, (1, routing.p))
    return out


def apply_two_threshold(routing: RoutingDecision, t_major, t_minor, keep_top1: bool = True) -> RoutingDecision:
    """Dual-threshold drop.

    Per original selection with normalised score ``s``: ``s >= t_minor``
    computes everything, ``t_major <= s < t_minor`` only the major half,
    lower scores nothing. On unreplayed routing the major half is expressed
    as compute fraction 0.5; on P=2 replayed routing slot ``j < k`` (major
    sub-expert) gets 1.0 and slot ``k + j`` (minor) gets 0.0.
    """
    norm = _require_normalized(routing)
    lo = np.broadcast_to(np.asarray(t_major, dtype=np.float64), norm.shape)
    hi = np.broadcast_to(np.asarray(t_minor, dtype=np.float64), norm.shape)
    if np.any(lo > hi):
        raise ConfigError("t_major must not exceed t_minor")
    full = norm >= hi
    major = norm >= lo
    if keep_top1 and norm.shape[0]:
        top = _top1_mask(norm)
        full |= top
        major |= top
    out = routing.copy()
    if routing.p == 1:
        out.fraction = np.where(full, 1.0, np.where(major, 0.5, 0.0))
    elif routing.p == 2:
        out.fraction = np.concatenate([np.where(major, 1.0, 0.0), np.where(full, 1.0, 0.0)], axis=1)
    else:
        raise RoutingError(f"dual-threshold drop needs P=1 or P=2 routing, got P={routing.p}")
    return out


def drop_1t(routing: RoutingDecision, policy: DropPolicy) -> RoutingDecision:
    if policy.kind != "one_threshold":
        raise ConfigError(f"drop_1t needs a one_threshold policy, got {policy.kind}")
    return apply_one_threshold(routing, policy.t_drop, policy.keep_top1)


def drop_2t(routing: RoutingDecision, policy: DropPolicy, recon_map) -> RoutingDecision:
    """Dual-threshold drop on P=2 replayed routing of a reconstructed layer.

    ``recon_map`` identifies the major/minor layout; pass
    ``ReconstructionMap.identity`` for a plain contiguous partition.
    """
    if policy.kind != "two_threshold":
        raise ConfigError(f"drop_2t needs a two_threshold policy, got {policy.kind}")
    if recon_map is None:
        raise ConfigError("drop_2t requires a reconstruction map")
    if routing.p != 2:
        raise RoutingError("drop_2t expects routing replayed onto major/minor sub-experts (P=2)")
    if routing.indices.size and routing.indices.max() >= 2 * recon_map.num_experts:
        raise RoutingError("routing references sub-experts outside the reconstruction map")
    return apply_two_threshold(routing, policy.t_major, policy.t_minor, policy.keep_top1)


def apply_policy(routing: RoutingDecision, policy: DropPolicy, config: MoeConfig, recon_map=None) -> RoutingDecision:
    """Normalise and apply ``policy``; unreplayed routing takes 2T as half fractions."""
    r = normalize_topk(routing, policy.should_normalize(config))
    if policy.kind == "none":
        return r
    if policy.kind == "one_threshold":
        return drop_1t(r, policy)
    if r.p == 2:
        if recon_map is None:
            recon_map = ReconstructionMap.identity(config.num_experts, config.d_ffn)
        return drop_2t(r, policy, recon_map)
    return apply_two_threshold(r, policy.t_major, policy.t_minor, policy.keep_top1)


@dataclass(frozen=True)
class DropStats:
    """Compute accounting in gated-expert units.

    One unit is one token through one full gated expert, i.e.
    ``2 * 3 * d_model * d_ffn`` FLOPs. Shared-expert work joins the
    denominator of ``drop_rate`` but is never dropped.
    """

    total_routed: float
    dropped: float
    shared: float
    unit_flops: int

    @property
    def drop_rate(self) -> float:
        denom = self.total_routed + self.shared
        return 0.0 if denom == 0 else self.dropped / denom

    @property
    def total_flops(self) -> float:
        return (self.total_routed + self.shared) * self.unit_flops

    @property
    def saved_flops(self) -> float:
        return self.dropped * self.unit_flops

    @property
    def retained_flops(self) -> float:
        return self.total_flops - self.saved_flops

    def to_dict(self) -> dict:
        return {
            "total_routed_units": self.total_routed,
            "dropped_units": self.dropped,
            "shared_units": self.shared,
            "drop_rate": self.drop_rate,
            "total_flops": self.total_flops,
            "retained_flops": self.retained_flops,
            "saved_flops": self.saved_flops,
        }


def compute_units(routing: RoutingDecision) -> np.ndarray:
    """Per-token routed compute in gated-expert units."""
    return routing.fraction.sum(axis=1) / routing.p


def drop_stats(before: RoutingDecision, after: RoutingDecision, config: MoeConfig, shared_sizes=None) -> DropStats:
    """Drop accounting between two routings of the same tokens.

    ``shared_sizes`` lists shared-expert intermediate sizes; by default each
    shared expert counts as one unit per token.
    """
    if before.indices.shape != after.indices.shape or before.p != after.p:
        raise ShapeError(f"routing shapes differ: {before.indices.shape} vs {after.indices.shape}")
    total = float(compute_units(before).sum())
    dropped = float((compute_units(before) - compute_units(after)).sum())
    if shared_sizes is None:
        per_token_shared = float(config.num_shared_experts)
    else:
        per_token_shared = float(sum(s / config.d_ffn for s in shared_sizes))
    shared = per_token_shared * before.num_tokens
    return DropStats(total, dropped, shared, 6 * config.d_model * config.d_ffn)


def layer_drop_stats(layer: MoeLayer, before: RoutingDecision, after: RoutingDecision) -> DropStats:
    return drop_stats(before, after, layer.config, [s.d_ffn for s in layer.shared_experts])


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    def rows(self):
        for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
            yield float(lo), float(hi), int(c)


@dataclass
class GatingDistributionReport:
    selection_counts: np.ndarray
    raw_scores: Histogram
    normalized_scores: Histogram
    tokens: int
    top_k: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["histogram", "bin", "bin_edge_lo", "bin_edge_hi", "count"])
        for e, c in enumerate(self.selection_counts):
            w.writerow(["expert_selection", e, e, e + 1, int(c)])
        for name, h in (("gate_score", self.raw_scores), ("normalized_score", self.normalized_scores)):
            for i, (lo, hi, c) in enumerate(h.rows()):
                w.writerow([name, i, repr(lo), repr(hi), c])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "tokens": self.tokens,
            "top_k": self.top_k,
            "selection_counts": self.selection_counts.tolist(),
            "bin_edges": self.raw_scores.edges.tolist(),
            "gate_score_counts": self.raw_scores.counts.tolist(),
            "normalized_score_counts": self.normalized_scores.counts.tolist(),
        }


def analyze_gating(layer: MoeLayer, tokens: np.ndarray, bins: int = 20) -> GatingDistributionReport:
    """Expert selection counts plus raw and normalised score histograms on [0, 1]."""
    if bins < 2:
        raise ConfigError("need at least 2 bins")
    x = as_matrix(tokens, dtype=layer.dtype)
    if x.shape[0] == 0:
        raise ShapeError("empty token set")
    r = topk_route(gate_scores(layer, x), layer.config.top_k)
    r = normalize_topk(r, not layer.config.gate_prenormalized)
    edges = np.linspace(0.0, 1.0, bins + 1)
    raw_counts, _ = np.histogram(r.raw.ravel(), bins=edges)
    norm_counts, _ = np.histogram(r.normalized.ravel(), bins=edges)
    sel = np.bincount(r.indices.ravel(), minlength=layer.config.num_experts)
    return GatingDistributionReport(sel, Histogram(edges, raw_counts), Histogram(edges, norm_counts), x.shape[0], layer.config.top_k)


def relative_error(y_drop: np.ndarray, y_ref: np.ndarray) -> float:
    """Mean over tokens of ``||y_drop - y_ref|| / ||y_ref||``."""
    num = np.linalg.norm((y_drop - y_ref).astype(np.float64), axis=1)
    den = np.linalg.norm(y_ref.astype(np.float64), axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(num == 0, 0.0, num / den)
    return float(ratio.mean()) if ratio.size else 0.0


def policy_for(kind: str, t: float, keep_top1: bool = True) -> DropPolicy:
    """Policy of ``kind`` at threshold ``t`` (dual band derived for 2T)."""
    kind = {"1t": "one_threshold", "2t": "two_threshold"}.get(kind, kind)
    if kind == "none":
        return DropPolicy.none()
    if kind == "one_threshold":
        return DropPolicy.one_threshold(t, keep_top1)
    if kind == "two_threshold":
        return DropPolicy.two_threshold(t, keep_top1=keep_top1)
    raise ConfigError(f"unknown policy {kind!r}")


@dataclass
class RunResult:
    """Outcome of running a token batch through a layer stack under a policy."""

    output: np.ndarray
    baseline: np.ndarray
    stats: list[DropStats]
    routings: list[RoutingDecision] = field(default_factory=list)

    @property
    def drop_rate(self) -> float:
        dropped = sum(s.dropped for s in self.stats)
        denom = sum(s.total_routed + s.shared for s in self.stats)
        return 0.0 if denom == 0 else dropped / denom

    @property
    def rel_error(self) -> float:
        return relative_error(self.output, self.baseline)


def run_policy(layers, tokens: np.ndarray, policy: DropPolicy, recon_maps=None) -> RunResult:
    """Forward ``tokens`` through one layer or a residual stack, with and without dropping.

    Errors are measured on the accumulated MoE contribution (final hidden
    state minus input); for a single layer this is the layer output.
    """
    if isinstance(layers, MoeLayer):
        layers = [layers]
    recon_maps = recon_maps or [None] * len(layers)
    x = as_matrix(tokens, dtype=layers[0].dtype)
    h_ref = x.copy()
    h = x.copy()
    stats, routings = [], []
    for layer, rmap in zip(layers, recon_maps):
        base_r = route(layer, h_ref)
        h_ref = h_ref + moe_forward(layer, h_ref, base_r)
        r0 = route(layer, h)
        r1 = apply_policy(r0, policy, layer.config, rmap)
        stats.append(layer_drop_stats(layer, r0, r1))
        routings.append(r1)
        h = h + moe_forward(layer, h, r1)
    return RunResult(h - x, h_ref - x, stats, routings)


@dataclass
class SweepRow:
    threshold: float
    drop_rate: float
    rel_error: float
    layer_drop_rates: list[float]


@dataclass
class SweepReport:
    policy: str
    rows: list[SweepRow]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n_layers = len(self.rows[0].layer_drop_rates) if self.rows else 0
        w.writerow(["threshold", "drop_rate", "rel_error"] + [f"layer{i}_drop_rate" for i in range(n_layers)])
        for r in self.rows:
            w.writerow([repr(r.threshold), repr(r.drop_rate), repr(r.rel_error)] + [repr(v) for v in r.layer_drop_rates])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"policy": self.policy, "rows": [r.__dict__ for r in self.rows]}


def threshold_sweep(layers, tokens: np.ndarray, policy_kind: str, thresholds, recon_maps=None, keep_top1: bool = True) -> SweepReport:
    thresholds = [float(t) for t in thresholds]
    if not thresholds:
        raise ConfigError("empty threshold list")
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise ConfigError("thresholds must be sorted ascending")
    rows = []
    for t in thresholds:
        res = run_policy(layers, tokens, policy_for(policy_kind, t, keep_top1), recon_maps)
        rows.append(SweepRow(t, res.drop_rate, res.rel_error, [s.drop_rate for s in res.stats]))
    return SweepReport(policy_for(policy_kind, 0.0).kind, rows)


def threshold_for_drop_rate(layers, tokens: np.ndarray, policy_kind: str, target: float, recon_maps=None, iters: int = 40) -> float:
    """Bisect for the smallest threshold whose drop rate reaches ``target``.

    A single layer is bisected on its routing alone; stacks need full
    forwards because later routings depend on earlier drops.
    """
    if isinstance(layers, MoeLayer):
        layer, rmap = layers, (recon_maps or [None])[0]
        r0 = route(layer, as_matrix(tokens, dtype=layer.dtype))

        def rate(t):
            r1 = apply_policy(r0, policy_for(policy_kind, t), layer.config, rmap)
            return layer_drop_stats(layer, r0, r1).drop_rate

    else:

        def rate(t):
            return run_policy(layers, tokens, policy_for(policy_kind, t), recon_maps).drop_rate

    lo, hi = 0.0, 1.0
    for _ in range(iters):
        mid = (lo + hi) / 2
        if rate(mid) < target:
            lo = mid
        else:
            hi = mid
    return hi
