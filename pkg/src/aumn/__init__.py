"""Attention-based memory network for weakly supervised temporal action localization.

Video-level labels only: segments are scored against a small bank of
learnable "action unit" templates whose values act as per-segment
classifiers, and the max template similarity doubles as foreground
attention for localization.
"""

from .errors import AUMNError, NumericalError, ValidationError
from .model import ModelDims, ModelParams, forward, init_params

__all__ = [
    "AUMNError",
    "NumericalError",
    "ValidationError",
    "ModelDims",
    "ModelParams",
    "forward",
    "init_params",
]

__version__ = "0.1.0"
