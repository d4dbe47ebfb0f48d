"""Multimodal entity linking with multi-grained mention/entity interaction.

The package links textual+visual mentions against a multimodal knowledge
base: a shared encoder produces global/local features for text and images,
three interaction units (text global-local, vision dual-gated, cross-modal
fusion) score each mention-entity pair, and an in-batch contrastive
objective with one loss term per unit trains the whole stack.  Ranking the
full KB per mention yields H@k / MRR / MR reports.
"""

from mimic_el.data_model import (
    Entity,
    KnowledgeBase,
    Mention,
    load_entities,
    load_mentions,
    subset_training,
)
from mimic_el.encoders import EncoderConfig, FeatureBundle
from mimic_el.interaction import InteractionWeights, ScoreBreakdown
from mimic_el.objective import LossBreakdown
from mimic_el.trainer import CheckpointInfo, TrainConfig, train
from mimic_el.evaluator import MetricsReport, compute_metrics

__version__ = "0.1.0"

__all__ = [
    "CheckpointInfo",
    "EncoderConfig",
    "Entity",
    "FeatureBundle",
    "InteractionWeights",
    "KnowledgeBase",
    "LossBreakdown",
    "Mention",
    "MetricsReport",
    "ScoreBreakdown",
    "TrainConfig",
    "compute_metrics",
    "load_entities",
    "load_mentions",
    "subset_training",
    "train",
]
