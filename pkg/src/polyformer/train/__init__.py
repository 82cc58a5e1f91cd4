"""Losses, optimizer, checkpoints and the three training phases."""

from .checkpoint import Checkpoint, config_digest, load_checkpoint, save_checkpoint
from .losses import composite_loss, dice_loss
from .optim import AdamW, AdamWConfig, AdamWState, adamw_step
from .phases import (PhaseConfig, PhaseRunner, adapt_phase_c, model_from_checkpoint, train_phase_a,
                     train_phase_b)

__all__ = [
    "AdamW", "AdamWConfig", "AdamWState", "Checkpoint", "PhaseConfig", "PhaseRunner", "adamw_step",
    "adapt_phase_c", "composite_loss", "config_digest", "dice_loss", "load_checkpoint",
    "model_from_checkpoint", "save_checkpoint", "train_phase_a", "train_phase_b",
]
