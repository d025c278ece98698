"""Vertical federated learning with multi-head ADMM, gradient baselines, DP and cost ledgers."""

from .admm import VimAdmm
from .admm_joint import VimAdmmJoint
from .base import TrainConfig, Trainer
from .baselines import FedBCD, Fdml, SplitLearning, Vafl
from .config import ExperimentConfig, parse_config
from .harness import run_experiment

__all__ = ["VimAdmm", "VimAdmmJoint", "SplitLearning", "Vafl", "FedBCD", "Fdml", "TrainConfig",
           "Trainer", "ExperimentConfig", "parse_config", "run_experiment"]
__version__ = "0.1.0"
