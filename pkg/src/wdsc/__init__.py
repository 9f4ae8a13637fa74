"""Stereo image compression with a common-information decoder."""

from .model import WynerModel, load_checkpoint, loss, save_checkpoint
from .tensor import Tensor

__all__ = ["Tensor", "WynerModel", "load_checkpoint", "loss", "save_checkpoint"]
__version__ = "0.1.0"
