"""Hypergradients by exactly reversing SGD with momentum in fixed point."""

from .revbuf import Ratio
from .train import Schedules, TrainState, sgd_forward, sgd_reverse

__all__ = ["Ratio", "Schedules", "TrainState", "sgd_forward", "sgd_reverse"]
__version__ = "0.1.0"
