"""Response-aware dialogue generation with scheduled sampling, at desk scale."""

from .data import Vocabulary, build_vocab, load_corpus
from .decode import GenerationConfig, generate
from .model import ModelConfig, forward, init_params, nll_loss
from .response_aware import RaConfig, init_ra_params
from .train import TrainConfig, run_ablation, train

__all__ = [
    "GenerationConfig",
    "ModelConfig",
    "RaConfig",
    "TrainConfig",
    "Vocabulary",
    "build_vocab",
    "forward",
    "generate",
    "init_params",
    "init_ra_params",
    "load_corpus",
    "nll_loss",
    "run_ablation",
    "train",
]

__version__ = "0.1.0"
