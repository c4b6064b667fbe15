"""Few-shot segmentation meta-learner with multi-similarity correlation and attention guidance,
implemented on a small numpy autodiff engine and exercised on synthetic shape data."""
from .backbone import Backbone, BackboneConfig, build_backbone
from .config import ConfigError, RunConfig
from .dataset import DatasetConfig, DatasetManifest, generate_synthetic_dataset, load_dataset
from .episodes import Episode, FoldSpec, sample_episode
from .evaluation import EvalReport, evaluate, fbiou, miou, predict_kshot
from .model import MetaLearner, ModelConfig, build_model
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Backbone", "BackboneConfig", "build_backbone", "ConfigError", "RunConfig", "DatasetConfig",
    "DatasetManifest", "generate_synthetic_dataset", "load_dataset", "Episode", "FoldSpec",
    "sample_episode", "EvalReport", "evaluate", "fbiou", "miou", "predict_kshot", "MetaLearner",
    "ModelConfig", "build_model", "TrainConfig", "train",
]
