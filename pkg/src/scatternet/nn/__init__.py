"""Minimal float64 reverse-mode autodiff and the layers built on it."""
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .params import Adam, ParameterStore
from .tensor import Tensor, no_grad

__all__ = ["Adam", "CheckpointError", "ParameterStore", "Tensor", "load_checkpoint", "no_grad", "save_checkpoint"]
