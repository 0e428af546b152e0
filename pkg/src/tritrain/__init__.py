"""Ternary quantization-aware training for small decoder-only transformers (numpy only)."""

__version__ = "0.1.0"

from .config import ModelConfig, RunConfig, TrainConfig  # noqa: E402
from .model import LanguageModel, perplexity  # noqa: E402
from .quant import TernaryLinear, ste_backward  # noqa: E402

__all__ = ["LanguageModel", "ModelConfig", "RunConfig", "TernaryLinear", "TrainConfig",
           "perplexity", "ste_backward", "__version__"]
