"""Bi-level autoregressive generation: an outer transformer over tokens and an
inner transformer over each token's features with a Gaussian-mixture head."""

from .config import RunConfig, SamplerConfig, TrainConfig
from .data import NormStats, SyntheticProcessSpec, TokenDataset
from .gmm import Gmm1D, GuidanceSpec, RawGmmOutput
from .model import ModelConfig
from .training import Checkpoint

__version__ = "0.1.0"
