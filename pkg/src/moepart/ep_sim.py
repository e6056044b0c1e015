"""Expert-parallel load simulation with load-aware drop thresholds."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .dropping import (
    DropPolicy,
    apply_one_threshold,
    apply_two_threshold,
    layer_drop_stats,
    normalize_topk,
)
from .errors import ConfigError, RoutingError
from .moe_model import MoeLayer, RoutingDecision, route
from .tensor_core import as_matrix

STRATEGIES = ("contiguous", "round_robin")


@dataclass(frozen=True)
class Placement:
    devices: int
    device_of: np.ndarray  # stored expert index -> device id
    strategy: str

    @property
    def num_experts(self) -> int:
        return self.device_of.size


def place_experts(num_experts: int, devices: int, strategy: str = "contiguous") -> Placement:
    if devices < 1 or num_experts < devices:
        raise ConfigError(f"cannot place {num_experts} experts on {devices} devices")
    if strategy == "contiguous":
        if num_experts % devices:
            raise ConfigError("contiguous placement needs num_experts divisible by devices")
        device_of = np.arange(num_experts) // (num_experts // devices)
    elif strategy == "round_robin":
        device_of = np.arange(num_experts) % devices
    else:
        raise ConfigError(f"unknown placement strategy {strategy!r}")
    return Placement(devices, device_of.astype(np.int64), strategy)


def device_loads(routing: RoutingDecision, placement: Placement) -> np.ndarray:
    """Compute units per device (a P-way replayed slot counts 1/P)."""
    if routing.indices.size and routing.indices.max() >= placement.num_experts:
        raise RoutingError("routing references an expert the placement does not cover")
    dev = placement.device_of[routing.indices]
    return np.bincount(dev.ravel(), weights=routing.fraction.ravel() / routing.p, minlength=placement.devices)


def load_aware_thresholds(loads, t_max: float) -> np.ndarray:
    """``t_max`` on devices at or above the balanced load, scaled down by the load ratio below it."""
    loads = np.asarray(loads, dtype=np.float64)
    if not 0 < t_max <= 1:
        raise ConfigError(f"t_max must lie in (0, 1], got {t_max}")
    total = loads.sum()
    if total <= 0:
        raise ConfigError("total load is zero")
    ratio = loads / (total / loads.size)
    return np.where(ratio >= 1.0, t_max, t_max * ratio)


@dataclass
class EpReport:
    pre_loads: np.ndarray
    post_loads: np.ndarray
    thresholds: np.ndarray
    drop_rate: float
    load_aware: bool
    policy: str

    @property
    def ideal_load(self) -> float:
        return float(self.pre_loads.sum() / self.pre_loads.size)

    @property
    def speedup(self) -> float:
        post = self.post_loads.max()
        return float("inf") if post == 0 else float(self.pre_loads.max() / post)

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "load_aware": self.load_aware,
            "devices": [
                {"device": d, "pre_load": float(a), "post_load": float(b), "threshold": float(t)}
                for d, (a, b, t) in enumerate(zip(self.pre_loads, self.post_loads, self.thresholds))
            ],
            "ideal_load": self.ideal_load,
            "drop_rate": self.drop_rate,
            "estimated_speedup": self.speedup,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        lines = ["device,pre_load,post_load,threshold"]
        for d, (a, b, t) in enumerate(zip(self.pre_loads, self.post_loads, self.thresholds)):
            lines.append(f"{d},{float(a)!r},{float(b)!r},{float(t)!r}")
        return "\n".join(lines) + "\n"


def simulate_routing(
    layer: MoeLayer,
    routing: RoutingDecision,
    placement: Placement,
    policy: DropPolicy,
    load_aware: bool = False,
) -> tuple[EpReport, RoutingDecision]:
    """Apply ``policy`` with per-device thresholds to an existing routing.

    Each original selection is judged by the threshold of the device that
    owns its first (major) slot. Uniform thresholding is the special case
    where every device uses ``policy.t_drop``.
    """
    pre = device_loads(routing, placement)
    normed = normalize_topk(routing, policy.should_normalize(layer.config))
    if policy.kind == "none":
        thresholds = np.zeros(placement.devices)
        after = normed
    else:
        t_max = policy.t_drop
        if load_aware and pre.sum() > 0:
            thresholds = load_aware_thresholds(pre, t_max)
        else:
            thresholds = np.full(placement.devices, float(t_max))
        owner = placement.device_of[routing.indices[:, : routing.k]]
        per_sel = thresholds[owner]
        if policy.kind == "one_threshold":
            after = apply_one_threshold(normed, per_sel, policy.keep_top1)
        else:
            # Same band as dual_band, evaluated per selection.
            half = np.minimum(policy.band, per_sel)
            lo, hi = per_sel - half, per_sel + half
            if routing.p not in (1, 2):
                raise RoutingError("dual-threshold drop needs P=1 or P=2 routing")
            after = apply_two_threshold(normed, lo, hi, policy.keep_top1)
    post = device_loads(after, placement)
    stats = layer_drop_stats(layer, routing, after)
    report = EpReport(pre, post, thresholds, stats.drop_rate, load_aware, policy.kind)
    return report, after


def simulate_step(
    layer: MoeLayer,
    tokens: np.ndarray,
    placement: Placement,
    policy: DropPolicy,
    load_aware: bool = False,
) -> tuple[EpReport, RoutingDecision]:
    x = as_matrix(tokens, dtype=layer.dtype)
    if placement.num_experts != len(layer.experts):
        raise ConfigError(
            f"placement covers {placement.num_experts} experts, layer stores {len(layer.experts)}"
        )
    return simulate_routing(layer, route(layer, x), placement, policy, load_aware)


def skewed_tokens(layer: MoeLayer, n: int, rng: np.random.Generator, skew: float = 2.0, hot: int = 1) -> np.ndarray:
    """Tokens biased toward the first ``hot`` experts' gate directions."""
    d = layer.config.d_model
    x = rng.standard_normal((n, d))
    g = layer.gate.astype(np.float64)
    for e in range(hot):
        col = g[:, e] / np.linalg.norm(g[:, e])
        x += skew * col[None, :]
    return x.astype(layer.dtype)


def balanced_tokens(layer: MoeLayer, n: int, rng: np.random.Generator) -> np.ndarray:
    """Tokens whose Top-K selections cover every expert equally often.

    Requires ``n`` to be a multiple of ``num_experts`` and a gate of full
    column rank. Token ``i`` is steered to experts ``i, i+1, ..., i+K-1``
    (mod E) with random descending preferences.
    """
    cfg = layer.config
    E, K = cfg.num_experts, cfg.top_k
    if n % E:
        raise ConfigError(f"balanced routing needs a token count divisible by {E}")
    g = layer.gate.astype(np.float64)
    pinv = np.linalg.pinv(g.T)
    xs = []
    for i in range(n):
        logits = np.zeros(E)
        prefs = np.sort(rng.uniform(0.5, 3.0, size=K))[::-1] + np.arange(K, 0, -1) * 1e-3
        for j in range(K):
            logits[(i + j) % E] = prefs[j] + 3.0
        xs.append(pinv @ logits)
    return np.asarray(xs).astype(layer.dtype)
