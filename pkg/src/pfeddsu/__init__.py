"""Differentially private personalized federated learning with sparsified updates."""

from .config import ExperimentSpec, parse_config
from .engine import TrainConfig, run_baseline_dp_fedavg_fb, run_training
from .privacy import PrivacyParams, calibrate_sigma, epsilon_after

__all__ = ["ExperimentSpec", "PrivacyParams", "TrainConfig", "calibrate_sigma", "epsilon_after",
           "parse_config", "run_baseline_dp_fedavg_fb", "run_training"]
__version__ = "0.1.0"
