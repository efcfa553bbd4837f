"""Minimal tensor engine: reverse-mode autodiff, Adam, checkpoints."""

from .checkpoint import CheckpointError, checkpoint_hash, load_checkpoint, save_checkpoint
from .gradcheck import grad_check
from .optim import AdamState, ConfigError, adam_step, init_gaussian, lr_at
from .tensor import ShapeError, Tape, TapeError, Tensor, backward

__all__ = [
    "AdamState",
    "CheckpointError",
    "ConfigError",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "adam_step",
    "backward",
    "checkpoint_hash",
    "grad_check",
    "init_gaussian",
    "load_checkpoint",
    "lr_at",
    "save_checkpoint",
]
