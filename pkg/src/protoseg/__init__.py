"""Few-shot medical image segmentation with self-supervised episodic training."""

__version__ = "0.1.0"

from .config import (
    AugmentationSpec,
    DataConfig,
    EncoderConfig,
    ExperimentSpec,
    InferenceConfig,
    PrototypeConfig,
    RunConfig,
    TrainConfig,
    TTTConfig,
    load_config,
    save_config,
)
from .data import DatasetManifest, SlicePool, VolumeScan, load_dataset, load_manifest
from .encoder import FeatureMap, ModelState, build_model, encode
from .episodes import Episode, sample_training_episode
from .evaluation import dice_score, run_experiment
from .fewshot import segment_query
from .inference import segment_volume, select_most_confident, adapt_to_query
from .prototype import PrototypeSet, assemble_prototype_set
from .similarity import SegmentationResult, predict_probabilities
from .training import run_training, train_episode

__all__ = [
    "AugmentationSpec",
    "DataConfig",
    "DatasetManifest",
    "EncoderConfig",
    "Episode",
    "ExperimentSpec",
    "FeatureMap",
    "InferenceConfig",
    "ModelState",
    "PrototypeConfig",
    "PrototypeSet",
    "RunConfig",
    "SegmentationResult",
    "SlicePool",
    "TTTConfig",
    "TrainConfig",
    "VolumeScan",
    "assemble_prototype_set",
    "build_model",
    "dice_score",
    "encode",
    "load_config",
    "load_dataset",
    "load_manifest",
    "predict_probabilities",
    "run_experiment",
    "run_training",
    "sample_training_episode",
    "save_config",
    "segment_query",
    "segment_volume",
    "select_most_confident",
    "adapt_to_query",
    "train_episode",
]
