"""Tabular transformer with multi-branch attention and label cross-attention."""

from .kernels import BACKEND
from .model import ModelConfig, build, forward_infer, forward_train, load, make_ablation, save

__all__ = ["BACKEND", "ModelConfig", "build", "forward_infer", "forward_train", "load", "make_ablation", "save"]
__version__ = "0.1.0"
