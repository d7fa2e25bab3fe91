"""Parallel reinforcement-learning history matching.

A stochastic actor-critic agent adjusts the permeability field of a
reservoir model, one bounded increment per time-step, until the simulated
well response matches a historical record.  Rollouts run across N
concurrent environments, each wrapping a built-in single-phase
finite-volume flow simulator.
"""

__version__ = "0.1.0"

from .fields import (
    GridSpec,
    NoiseSpec,
    PermeabilityField,
    make_synthetic_case,
    sample_correlated_field,
    stack_parameters,
    unstack_parameters,
)
from .objective import (
    ObjectiveSpec,
    ObservationSeries,
    ObservationSpec,
    RewardConfig,
    evaluate_objective,
    step_reward,
    terminal_reward,
)
from .simulator import (
    FiniteVolumeModel,
    FluidProps,
    SimulatedSeries,
    SimulationError,
    WellControl,
    WellSchedule,
    WellSpec,
)
from .environment import EnvConfig, HistoryMatchEnv, Transition, apply_action, classify_termination

__all__ = [
    "GridSpec",
    "NoiseSpec",
    "PermeabilityField",
    "make_synthetic_case",
    "sample_correlated_field",
    "stack_parameters",
    "unstack_parameters",
    "ObjectiveSpec",
    "ObservationSeries",
    "ObservationSpec",
    "RewardConfig",
    "evaluate_objective",
    "step_reward",
    "terminal_reward",
    "FiniteVolumeModel",
    "FluidProps",
    "SimulatedSeries",
    "SimulationError",
    "WellControl",
    "WellSchedule",
    "WellSpec",
    "EnvConfig",
    "HistoryMatchEnv",
    "Transition",
    "apply_action",
    "classify_termination",
]
