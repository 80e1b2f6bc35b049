"""Diffusion models for decision making, in plain numpy."""

from . import nn, schedules, diffusion, oracles, masking, solvers, guidance
from . import envs, datasets, toy, plotting, agents
from .errors import (
    ArgumentError,
    ConfigurationError,
    DiffkitError,
    DimensionError,
    DomainError,
    FormatError,
    NumericError,
)
from .schedules import NoiseSchedule, make_schedule
from .diffusion import Denoiser, PredictionKind, TrainConfig, train
from .solvers import SampleConfig, SolverKind, sample
from .envs import PointMazeEnv, make_policy
from .datasets import TrajectoryDataset
from .agents import make_agent

__version__ = "0.1.0"
