"""Adaptive attention-masking toolkit for standalone ABSA tasks."""

from . import autodiff, corpus, encoder, masking, tasks, training
from .autodiff import ParamStore, Tensor

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "corpus",
    "encoder",
    "masking",
    "tasks",
    "training",
    "ParamStore",
    "Tensor",
    "__version__",
]
