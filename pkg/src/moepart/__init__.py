"""Expert partition, reconstruction and computation dropping for MoE layers."""

from .artifact_io import generate_synthetic, load_model, load_tokens, save_model, save_tokens, synthetic_tokens
from .dropping import DropPolicy, DropStats, analyze_gating, drop_1t, drop_2t, drop_stats, normalize_topk, threshold_sweep
from .errors import MoeError
from .moe_model import Expert, MoeConfig, MoeLayer, MoeModel, RoutingDecision, gate_scores, moe_forward, route, topk_route
from .reconstruct import ImportanceProfile, ReconstructionMap, profile_importance, reconstruct_experts
from .transform import PartitionSpec, complete_transform, partial_transform, replay_routing, reverse_partial, verify_equivalence

__version__ = "0.1.0"

__all__ = [
    "DropPolicy",
    "DropStats",
    "Expert",
    "ImportanceProfile",
    "MoeConfig",
    "MoeError",
    "MoeLayer",
    "MoeModel",
    "PartitionSpec",
    "ReconstructionMap",
    "RoutingDecision",
    "analyze_gating",
    "complete_transform",
    "drop_1t",
    "drop_2t",
    "drop_stats",
    "gate_scores",
    "generate_synthetic",
    "load_model",
    "load_tokens",
    "moe_forward",
    "normalize_topk",
    "partial_transform",
    "profile_importance",
    "reconstruct_experts",
    "replay_routing",
    "reverse_partial",
    "route",
    "save_model",
    "save_tokens",
    "synthetic_tokens",
    "threshold_sweep",
    "topk_route",
    "verify_equivalence",
]
