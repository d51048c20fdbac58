"""Looped transformers with a constant-memory gated KV cache."""

from .config import ModelConfig, RunConfig, TrainSchedule
from .looplm import LoopLM, ShareStrategy
from .melt import LatentKVState, MeltLM

__version__ = "0.1.0"

__all__ = [
    "LatentKVState",
    "LoopLM",
    "MeltLM",
    "ModelConfig",
    "RunConfig",
    "ShareStrategy",
    "TrainSchedule",
]
