"""Noise-robust audio-visual speech recognition on a small numpy autodiff engine."""
from .config import RunConfig, load_config
from .model import AVSRModel, ModelConfig

__all__ = ["AVSRModel", "ModelConfig", "RunConfig", "load_config"]
__version__ = "0.1.0"
