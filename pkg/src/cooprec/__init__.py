"""Cloud/device cooperative next-click recommendation at desk scale."""

from cooprec.candidates import CandidateIndex, InteractionMatrix, Proportion, Threshold, candidate_set
from cooprec.data import (
    Behavior,
    DatasetSplit,
    InteractionRecord,
    PartitionConfig,
    Session,
    build_split,
    filter_dataset,
    parse_interactions,
    partition_temporal,
    sessionize,
    split_users,
)
from cooprec.experiments import TrainConfig, Workspace, run_experiment_matrix
from cooprec.metrics import RankedPrediction, mrr_at_k, recall_at_k
from cooprec.model import Mode, ModelConfig, RecModel, build_model, fine_tune, train_global
from cooprec.sparsity import LassoConfig, PruningSchedule, agp_sparsity_at, apply_magnitude_prune, lasso_truncate
from cooprec.wire import decode_model, decode_sparse, encode_model, encode_sparse

__version__ = "0.1.0"

__all__ = [
    "Behavior",
    "CandidateIndex",
    "DatasetSplit",
    "InteractionMatrix",
    "InteractionRecord",
    "LassoConfig",
    "Mode",
    "ModelConfig",
    "PartitionConfig",
    "Proportion",
    "PruningSchedule",
    "RankedPrediction",
    "RecModel",
    "Session",
    "Threshold",
    "TrainConfig",
    "Workspace",
    "agp_sparsity_at",
    "apply_magnitude_prune",
    "build_model",
    "build_split",
    "candidate_set",
    "decode_model",
    "decode_sparse",
    "encode_model",
    "encode_sparse",
    "filter_dataset",
    "fine_tune",
    "lasso_truncate",
    "mrr_at_k",
    "parse_interactions",
    "partition_temporal",
    "recall_at_k",
    "run_experiment_matrix",
    "sessionize",
    "split_users",
    "train_global",
]
