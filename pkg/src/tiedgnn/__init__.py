"""Session-based next-item recommendation with disentangled graph layers."""

from .config import TrainConfig, load_preset
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "TrainConfig", "load_preset", "__version__"]
