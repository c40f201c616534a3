"""Cooperating auto-encoder subnetworks as a data-driven regularizer."""

from coopsubnet.config import ExperimentConfig, Settings
from coopsubnet.experiment import run_experiment

__all__ = ["ExperimentConfig", "Settings", "run_experiment"]
