"""dhsl: deep hybrid similarity learning for image-pair re-identification.

A light two-branch convolutional feature extractor with shared parameters,
joined by element-wise absolute-difference and multiplication layers whose
projections form a learned hybrid similarity score, trained as a pair
classifier and evaluated with CMC curves. All numerics are hand-written
numpy kernels.
"""

from .data import (DatasetManifest, ManifestEntry, augment, decode_resize,
                   generate_synthetic, load_manifest, load_manifest_file,
                   make_split)
from .errors import (CheckpointFormatError, ConfigError, DataError, DhslError,
                     ProtocolError, ShapeError, StateError,
                     TrainingDivergenceError)
from .estimator import HybridSimilarity
from .evaluation import (CmcCurve, RankTable, ScoreDistribution,
                         evaluate_protocol, evaluate_trial, score_distributions)
from .layers import FeatureStack, StackConfig, count_params
from .model import PairModel, build_model
from .similarity import (count_metric_params, hybrid_score, logistic_loss,
                         euclidean_score, cosine_score, mahalanobis_score)
from .training import (MomentumState, TrainConfig, load_checkpoint,
                       lr_schedule_step, mine_hard_negatives, run_training,
                       sample_batch, save_checkpoint, train_step)

__version__ = "0.1.0"

__all__ = [
    "HybridSimilarity",
    "PairModel",
    "build_model",
    "FeatureStack",
    "StackConfig",
    "count_params",
    "count_metric_params",
    "hybrid_score",
    "logistic_loss",
    "euclidean_score",
    "cosine_score",
    "mahalanobis_score",
    "TrainConfig",
    "MomentumState",
    "train_step",
    "lr_schedule_step",
    "sample_batch",
    "mine_hard_negatives",
    "run_training",
    "save_checkpoint",
    "load_checkpoint",
    "DatasetManifest",
    "ManifestEntry",
    "load_manifest",
    "load_manifest_file",
    "generate_synthetic",
    "make_split",
    "augment",
    "decode_resize",
    "CmcCurve",
    "RankTable",
    "ScoreDistribution",
    "evaluate_trial",
    "evaluate_protocol",
    "score_distributions",
    "DhslError",
    "ShapeError",
    "StateError",
    "DataError",
    "ProtocolError",
    "ConfigError",
    "CheckpointFormatError",
    "TrainingDivergenceError",
]
