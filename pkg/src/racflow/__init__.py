"""Rectified-flow auto coder on a numpy autodiff core."""

from .config import RunConfig, load_config
from .model import RacModel
from .state import StateSpec
from .tensor import GradientTape, Parameter, Tensor
from .trainer import train_loop

__all__ = ["GradientTape", "Parameter", "RacModel", "RunConfig", "StateSpec", "Tensor",
           "load_config", "train_loop"]
__version__ = "0.1.0"
