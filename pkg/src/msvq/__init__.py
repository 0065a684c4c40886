"""Multi-scale VQ-VAE video codec for short low-resolution clips."""

from .model import ModelConfig, MSVQVAE, param_count, tiny_config
from .trainer import TrainConfig

__version__ = "0.1.0"

__all__ = ["ModelConfig", "MSVQVAE", "TrainConfig", "param_count", "tiny_config", "__version__"]
