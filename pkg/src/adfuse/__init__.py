"""Multimodal feature fusion and brand grounding over precomputed embedding banks."""

from .adapters import (
    AdapterInput,
    AttentionAdapterParams,
    MlpAdapterParams,
    attention_backward,
    attention_forward,
    init_params,
    load_checkpoint,
    mlp_forward,
    mlp_label_forward,
    save_checkpoint,
)
from .banks import EmbeddingRecord, FeatureBank, get, load_bank, save_bank
from .kb import BrandEntry, KnowledgeBase, ingest, match_text
from .manifest import PairRow, read_manifest, write_manifest
from .retrieval import CandidateSet, EvalProtocol, Metrics, build_candidates, evaluate, score
from .synthetic import FusionSpec, generate_fusion_data, write_fusion_dataset
from .textprep import CleaningRules, OcrParagraph, clean_label, group_blocks, select_ground_truth
from .training import (
    TrainConfig,
    Trainer,
    adam_step,
    contrastive_loss,
    regularizer,
    select_hard_negatives,
    train,
)
from .vision import PromptBank, RegionProposal, ensemble, score_entries, select_vision_candidate

__version__ = "0.1.0"

__all__ = [
    "AdapterInput",
    "AttentionAdapterParams",
    "BrandEntry",
    "CandidateSet",
    "CleaningRules",
    "EmbeddingRecord",
    "EvalProtocol",
    "FeatureBank",
    "FusionSpec",
    "KnowledgeBase",
    "Metrics",
    "MlpAdapterParams",
    "OcrParagraph",
    "PairRow",
    "PromptBank",
    "RegionProposal",
    "TrainConfig",
    "Trainer",
    "adam_step",
    "attention_backward",
    "attention_forward",
    "build_candidates",
    "clean_label",
    "contrastive_loss",
    "ensemble",
    "evaluate",
    "generate_fusion_data",
    "get",
    "group_blocks",
    "ingest",
    "init_params",
    "load_bank",
    "load_checkpoint",
    "match_text",
    "mlp_forward",
    "mlp_label_forward",
    "read_manifest",
    "regularizer",
    "save_bank",
    "save_checkpoint",
    "score",
    "score_entries",
    "select_ground_truth",
    "select_hard_negatives",
    "select_vision_candidate",
    "train",
    "write_fusion_dataset",
    "write_manifest",
]
