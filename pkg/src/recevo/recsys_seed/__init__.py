"""Seed recommender pipelines: MF-BPR and a one-block self-attention sequential model."""

from .mf import MFModel, bpr_loss_and_grad, train_mf_bpr
from .model import (
    DivergenceError,
    ModelConfig,
    TopK,
    TrainedModel,
    evaluate_split,
    export_artifacts,
    load_model,
    read_matrix,
    read_score_table,
    read_training_log,
    recommend_top_k,
    score_candidates,
)
from .sequential import SequentialModel, train_sequential_attention

__all__ = [
    "DivergenceError",
    "MFModel",
    "ModelConfig",
    "SequentialModel",
    "TopK",
    "TrainedModel",
    "bpr_loss_and_grad",
    "evaluate_split",
    "export_artifacts",
    "load_model",
    "read_matrix",
    "read_score_table",
    "read_training_log",
    "recommend_top_k",
    "score_candidates",
    "train_mf_bpr",
    "train_sequential_attention",
]
