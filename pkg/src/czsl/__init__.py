"""Context-aware zero-shot object ranking from visual, context and prior scores."""

from .components import (
    ContextScorer,
    JointScorer,
    PriorScorer,
    Scorers,
    ScoreTable,
    VisualScorer,
    score_all_classes,
    score_table,
)
from .datamodel import ClassVocab, Scene, SceneDataset, ZslInstance, make_instances
from .embeddings import EmbeddingTable, cosine, load_embeddings
from .inference import CalibrationWeights, calibrate, combined_logscore, rank
from .metrics import aggregate, first_relevant, spearman
from .training import TrainConfig, train

__version__ = "0.1.0"
