"""Discriminative vMF mixture memory and memory-conditional generation for GANs."""

from .errors import MemGanError
from .gan import GanHyper, Mode, build_model, train_step
from .memory import MemoryParams, MemoryState, init_memory

__all__ = [
    "GanHyper",
    "MemGanError",
    "MemoryParams",
    "MemoryState",
    "Mode",
    "build_model",
    "init_memory",
    "train_step",
]
__version__ = "0.1.0"
