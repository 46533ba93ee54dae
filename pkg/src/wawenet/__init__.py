"""Waveform-based speech quality and intelligibility estimation."""

from .errors import WaweError
from .model import ModelConfig, WaweNet, build
from .preprocess import TARGETS, active_level, extract_segments, normalize_level

__all__ = [
    "ModelConfig", "TARGETS", "WaweError", "WaweNet",
    "active_level", "build", "extract_segments", "normalize_level",
]
__version__ = "0.1.0"
