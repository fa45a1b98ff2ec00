"""Denoising Markov models: score-based generation for general Markov processes.

The package trains a score network against a forward Markov process
(finite-state chains, diffusions, geometric Brownian motion, compound
Poisson jumps on the torus) and samples by simulating the learned
backward process.
"""

from .datasets import TargetSpec, energy_distance, histogram_tv, sample_target
from .diffusion import GbmSpec
from .finite_state import DiscreteSpace
from .generator import DensityVector, RateMatrix, ScoreTable
from .jump import TorusJumpSpec
from .training import (
    FiniteStateEngine,
    GbmEngine,
    JumpEngine,
    OuEngine,
    ScoreModel,
    TimeGrid,
    TrainConfig,
    error_decomposition_report,
    infer,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "DensityVector",
    "DiscreteSpace",
    "FiniteStateEngine",
    "GbmEngine",
    "GbmSpec",
    "JumpEngine",
    "OuEngine",
    "RateMatrix",
    "ScoreModel",
    "ScoreTable",
    "TargetSpec",
    "TimeGrid",
    "TorusJumpSpec",
    "TrainConfig",
    "energy_distance",
    "error_decomposition_report",
    "histogram_tv",
    "infer",
    "sample_target",
    "train",
]
