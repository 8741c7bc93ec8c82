"""Cross-domain few-shot segmentation on a small numpy autodiff kernel."""

from .episodes import DomainSpec, Episode, EpisodeDataset, forge_dataset, sample_episode
from .segmenter import FewShotSegmenter, ModelConfig, segment_episode
from .tensor import Tensor
from .trainer import TrainConfig, evaluate, gradcheck, parameter_count, train

__version__ = "0.1.0"

__all__ = [
    "DomainSpec",
    "Episode",
    "EpisodeDataset",
    "FewShotSegmenter",
    "ModelConfig",
    "Tensor",
    "TrainConfig",
    "evaluate",
    "forge_dataset",
    "gradcheck",
    "parameter_count",
    "sample_episode",
    "segment_episode",
    "train",
]
