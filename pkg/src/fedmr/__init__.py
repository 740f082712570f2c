"""Federated learning via layer-wise model recombination, with baselines and a
peer-to-peer secure recombination protocol."""

from ._kernels import BACKEND
from .data import ClientShard, PartitionSpec, Samples, heterogeneity_report, make_blobs, partition
from .model import (
    ArchitectureSpec,
    LayerBlock,
    LayeredModel,
    aggregate_mean,
    init_model,
    pairwise_cosine_mean,
    sq_distance_sum,
    sum_models,
)
from .orchestrator import RoundRecord, RunConfig, final_global, run, sample_clients
from .recombine import RecombinationPlan, check_lemma1, recombine, sample_plan, segment_groups
from .secure import SecureConfig, collusion_probe, expected_overhead, secure_recombine, secure_round
from .train import LocalTrainConfig, backward, client_update, evaluate, forward

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ArchitectureSpec",
    "ClientShard",
    "LayerBlock",
    "LayeredModel",
    "LocalTrainConfig",
    "PartitionSpec",
    "RecombinationPlan",
    "RoundRecord",
    "RunConfig",
    "Samples",
    "SecureConfig",
    "aggregate_mean",
    "backward",
    "check_lemma1",
    "client_update",
    "collusion_probe",
    "evaluate",
    "expected_overhead",
    "final_global",
    "forward",
    "heterogeneity_report",
    "init_model",
    "make_blobs",
    "pairwise_cosine_mean",
    "partition",
    "recombine",
    "run",
    "sample_clients",
    "sample_plan",
    "secure_recombine",
    "secure_round",
    "segment_groups",
    "sq_distance_sum",
    "sum_models",
]
