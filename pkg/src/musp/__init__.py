"""Multi-part soft attention for vehicle re-identification, built on a small numpy autograd engine."""

from .model import ModelConfig, MUSPNet
from .trainer import RunConfig, train

__all__ = ["ModelConfig", "MUSPNet", "RunConfig", "train"]
__version__ = "0.1.0"
