"""Quantum trajectories, estimated filters and their long-time structure."""

from .config import load_bundled, load_config, save_config
from .experiments import Experiment, ExperimentConfig, MonteCarloSummary, run_experiment
from .model import ModelSpec, lindbladian, adjoint_lindbladian, evolve_master
from .sde import SimConfig, simulate_pair, simulate_pairs, simulate_reference
from .structure import StructureReport, Verdict, analyze

__version__ = "0.1.0"

__all__ = [
    "Experiment",
    "ExperimentConfig",
    "ModelSpec",
    "MonteCarloSummary",
    "SimConfig",
    "StructureReport",
    "Verdict",
    "adjoint_lindbladian",
    "analyze",
    "evolve_master",
    "lindbladian",
    "load_bundled",
    "load_config",
    "run_experiment",
    "save_config",
    "simulate_pair",
    "simulate_pairs",
    "simulate_reference",
]
