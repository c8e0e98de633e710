"""Gradient boosting of small CNN and RNN weak learners for multilabel sequence labeling."""

from .boosting import BoostConfig, BoostData, StrongLearner, run_boosting
from .weak_learners import CnnSpec, RnnSpec, TrainConfig, WeakLearner, build

__all__ = ["BoostConfig", "BoostData", "CnnSpec", "RnnSpec", "StrongLearner", "TrainConfig", "WeakLearner",
           "build", "run_boosting"]
__version__ = "0.1.0"
