"""Message-level ETP vs S-ETP communication model.

Devices are numbered ``g * tp + r`` for EP group ``g`` and TP rank ``r``.
Each EP group hosts ``num_experts / ep`` experts, every expert sharded
across the group's ``tp`` ranks (shard ``s`` on rank ``s``).

Every device holds its own tokens. ETP:
  dispatch  AlltoAll among ranks sharing ``r`` (the ``tp`` rank-aligned
            AlltoAlls run concurrently as one launch), then AllGather in
            the TP group
  combine   ReduceScatter in the TP group, then AlltoAll back
S-ETP (partial transformation, each shard is an ordinary EP expert):
  dispatch  one AlltoAll over all ``ep * tp`` devices
  combine   one AlltoAll back; shard partials are summed at the source

Messages are enumerated point to point; each phase is timed as
``alpha + max_link_bytes / beta``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

LINK_MODELS = ("port", "pair")


@dataclass(frozen=True)
class CommScenario:
    ep: int
    tp: int
    tokens_per_device: int
    bytes_per_token: int
    alpha: float
    beta: float
    routing: np.ndarray  # (devices, tokens_per_device, K) original expert ids
    num_experts: int
    link_model: str = "port"

    def __post_init__(self):
        if min(self.ep, self.tp, self.tokens_per_device, self.bytes_per_token, self.num_experts) < 1:
            raise ConfigError("EP, TP, token count, token size and expert count must be positive")
        if self.alpha < 0 or self.beta <= 0:
            raise ConfigError("alpha must be >= 0 and beta > 0")
        if self.num_experts % self.ep:
            raise ConfigError(f"{self.num_experts} experts cannot be split over EP={self.ep}")
        if self.link_model not in LINK_MODELS:
            raise ConfigError(f"unknown link model {self.link_model!r}")
        if self.routing.shape[:2] != (self.devices, self.tokens_per_device):
            raise ConfigError(f"routing sample shape {self.routing.shape} does not match the scenario")

    @property
    def devices(self) -> int:
        return self.ep * self.tp

    def group_of_expert(self, e) -> np.ndarray:
        return np.asarray(e) // (self.num_experts // self.ep)

    def with_bytes(self, bytes_per_token: int) -> "CommScenario":
        return CommScenario(
            self.ep, self.tp, self.tokens_per_device, bytes_per_token, self.alpha, self.beta,
            self.routing, self.num_experts, self.link_model,
        )

    def with_alpha(self, alpha: float) -> "CommScenario":
        return CommScenario(
            self.ep, self.tp, self.tokens_per_device, self.bytes_per_token, alpha, self.beta,
            self.routing, self.num_experts, self.link_model,
        )


def random_scenario(
    ep: int,
    tp: int,
    rng: np.random.Generator,
    tokens_per_device: int = 64,
    num_experts: int | None = None,
    top_k: int = 2,
    bytes_per_token: int = 4096,
    alpha: float = 5e-6,
    beta: float = 1e11,
    skew: float = 0.0,
    link_model: str = "port",
) -> CommScenario:
    """Scenario with a sampled Top-K routing; ``skew > 0`` favours low expert ids."""
    num_experts = num_experts or 4 * ep
    log_w = -skew * np.arange(num_experts) / num_experts
    # Gumbel top-k: weighted sampling without replacement.
    keys = log_w + rng.gumbel(size=(ep * tp, tokens_per_device, num_experts))
    routing = np.argsort(-keys, axis=2, kind="stable")[:, :, :top_k]
    return CommScenario(ep, tp, tokens_per_device, bytes_per_token, alpha, beta, routing, num_experts, link_model)


@dataclass
class Phase:
    """One collective, as parallel arrays of point-to-point messages."""

    name: str
    collective: str
    participants: int
    src: np.ndarray
    dst: np.ndarray
    nbytes: int
    devices: int

    @property
    def messages(self) -> int:
        return int(self.src.size)

    def link_bytes(self) -> np.ndarray:
        """``(devices, devices)`` bytes per directed pair; local copies excluded."""
        remote = self.src != self.dst
        m = np.zeros((self.devices, self.devices), dtype=np.int64)
        np.add.at(m, (self.src[remote], self.dst[remote]), self.nbytes)
        return m

    def max_link_bytes(self, link_model: str = "port") -> int:
        m = self.link_bytes()
        if link_model == "pair":
            return int(m.max(initial=0))
        return int(max(m.sum(axis=1).max(initial=0), m.sum(axis=0).max(initial=0)))

    def time(self, alpha: float, beta: float, link_model: str = "port") -> float:
        return alpha + self.max_link_bytes(link_model) / beta


@dataclass
class CommReport:
    scheme: str
    phases: list[Phase]
    alpha: float
    beta: float
    link_model: str
    # rows of (device, source device, token, expert, shard), lexicographically sorted
    deliveries: np.ndarray = field(default_factory=lambda: np.zeros((0, 5), dtype=np.int64))

    @property
    def launches(self) -> int:
        return len(self.phases)

    @property
    def total_time(self) -> float:
        return sum(p.time(self.alpha, self.beta, self.link_model) for p in self.phases)

    @property
    def total_bytes(self) -> int:
        return int(sum(p.link_bytes().sum() for p in self.phases))

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "link_model": self.link_model,
            "launches": self.launches,
            "total_time_s": self.total_time,
            "total_link_bytes": self.total_bytes,
            "deliveries": int(self.deliveries.shape[0]),
            "phases": [
                {
                    "name": p.name,
                    "collective": p.collective,
                    "participants": p.participants,
                    "messages": p.messages,
                    "max_link_bytes": p.max_link_bytes(self.link_model),
                    "time_s": p.time(self.alpha, self.beta, self.link_model),
                    "link_bytes": p.link_bytes().tolist(),
                }
                for p in self.phases
            ],
        }


def _selections(sc: CommScenario):
    """Flat arrays ``(src_device, token, expert, target_group)``, one entry per routed selection."""
    d, t, _ = np.indices(sc.routing.shape)
    e = sc.routing.ravel()
    return d.ravel(), t.ravel(), e, sc.group_of_expert(e)


def _sorted_rows(*cols) -> np.ndarray:
    rows = np.stack([np.asarray(c, dtype=np.int64).ravel() for c in cols], axis=1)
    return rows[np.lexsort(rows.T[::-1])]


def simulate_etp(sc: CommScenario) -> CommReport:
    tp, B, n = sc.tp, sc.bytes_per_token, sc.devices
    d, t, e, g = _selections(sc)
    head = g * tp + d % tp  # peer with the same TP rank in the target group
    shard = np.arange(tp)
    member = g[:, None] * tp + shard[None, :]  # every rank of the target group
    others = shard[None, :] != (d % tp)[:, None]
    heads = np.broadcast_to(head[:, None], member.shape)
    phases = [
        Phase("dispatch", "AlltoAll", sc.ep, d, head, B, n),
        Phase("dispatch", "AllGather", tp, heads[others], member[others], B, n),
        Phase("combine", "ReduceScatter", tp, member[others], heads[others], B, n),
        Phase("combine", "AlltoAll", sc.ep, head, d, B, n),
    ]
    rep = lambda a: np.broadcast_to(a[:, None], member.shape)
    deliveries = _sorted_rows(member, rep(d), rep(t), rep(e), np.broadcast_to(shard, member.shape))
    return CommReport("ETP", phases, sc.alpha, sc.beta, sc.link_model, deliveries)


def simulate_setp(sc: CommScenario) -> CommReport:
    tp, B, n = sc.tp, sc.bytes_per_token, sc.devices
    d, t, e, g = _selections(sc)
    shard = np.arange(tp)
    dst = (g[:, None] * tp + shard[None, :]).ravel()
    src = np.repeat(d, tp)
    phases = [
        Phase("dispatch", "AlltoAll", n, src, dst, B, n),
        Phase("combine", "AlltoAll", n, dst, src, B, n),
    ]
    deliveries = _sorted_rows(dst, src, np.repeat(t, tp), np.repeat(e, tp), np.tile(shard, d.size))
    return CommReport("S-ETP", phases, sc.alpha, sc.beta, sc.link_model, deliveries)


@dataclass
class ComparisonReport:
    input_bytes: int
    etp_time: float
    setp_time: float

    @property
    def etp_bandwidth(self) -> float:
        return self.input_bytes / self.etp_time

    @property
    def setp_bandwidth(self) -> float:
        return self.input_bytes / self.setp_time

    @property
    def improvement_pct(self) -> float:
        return (self.setp_bandwidth / self.etp_bandwidth - 1.0) * 100.0

    def to_dict(self) -> dict:
        return {
            "bytes": self.input_bytes,
            "etp_time_s": self.etp_time,
            "setp_time_s": self.setp_time,
            "etp_bw": self.etp_bandwidth,
            "setp_bw": self.setp_bandwidth,
            "improvement_pct": self.improvement_pct,
        }


def compare_reports(etp: CommReport, setp: CommReport, input_bytes: int) -> ComparisonReport:
    return ComparisonReport(input_bytes, etp.total_time, setp.total_time)


def compare_schemes(sc: CommScenario) -> ComparisonReport:
    """Effective bandwidth = input bytes per device / modelled total time."""
    input_bytes = sc.tokens_per_device * sc.bytes_per_token
    return compare_reports(simulate_etp(sc), simulate_setp(sc), input_bytes)


def bandwidth_sweep(sc: CommScenario, sizes) -> list[ComparisonReport]:
    """Compare schemes over a list of per-token payload sizes.

    Message layouts do not depend on the payload, so each scheme is
    simulated once and its per-phase maxima rescaled.
    """
    etp = simulate_etp(sc.with_bytes(1))
    setp = simulate_setp(sc.with_bytes(1))
    etp_max = [p.max_link_bytes(sc.link_model) for p in etp.phases]
    setp_max = [p.max_link_bytes(sc.link_model) for p in setp.phases]
    rows = []
    for size in sizes:
        size = int(size)
        t_etp = sum(sc.alpha + m * size / sc.beta for m in etp_max)
        t_setp = sum(sc.alpha + m * size / sc.beta for m in setp_max)
        rows.append(ComparisonReport(sc.tokens_per_device * size, t_etp, t_setp))
    return rows


def sweep_csv(rows: list[ComparisonReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bytes", "etp_bw", "setp_bw", "improvement_pct"])
    for r in rows:
        w.writerow([r.input_bytes, repr(r.etp_bandwidth), repr(r.setp_bandwidth), repr(r.improvement_pct)])
    return buf.getvalue()


def report_json(etp: CommReport, setp: CommReport) -> str:
    return json.dumps({"etp": etp.to_dict(), "setp": setp.to_dict()}, indent=2, sort_keys=True)
