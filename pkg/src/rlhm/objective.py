"""Mismatch objective and reward shaping.

The objective is a scaled weighted least-squares mismatch between the
historical record and the simulated response, plus a weighted quadratic
penalty on the distance from a prior parameter estimate.  Rewards are the
per-step drop of that objective, with fixed bonuses/penalties at episode
termination.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SOLVED = "solved"
DIVERGED = "diverged"
TIMED_OUT = "timed_out"
RUNNING = "running"
FAILED = "failed"

TERMINAL_OUTCOMES = (SOLVED, DIVERGED, TIMED_OUT, FAILED)


@dataclass(frozen=True)
class ObservationSpec:
    """Which simulated quantity is compared against history.

    kind:
        "producer_bhp"  bottom-hole pressure of one named producer,
                        reported in psi (unit_scale converts from Pa);
        "field_rate"    total production rate over all producers, m3/day.
    """

    kind: str
    well: str | None = None
    unit_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("producer_bhp", "field_rate"):
            raise ValueError(f"unknown observation kind {self.kind!r}")
        if self.kind == "producer_bhp" and not self.well:
            raise ValueError("producer_bhp observations need a well name")


@dataclass
class ObservationSeries:
    """Historical record: one value per report step, with per-value weights."""

    spec: ObservationSpec
    times_days: np.ndarray
    values: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.times_days = np.asarray(self.times_days, dtype=np.float64).ravel()
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        self.weights = np.asarray(self.weights, dtype=np.float64).ravel()
        if self.values.size != self.weights.size:
            raise ValueError("observation values and weights differ in length")
        if np.any(self.weights < 0):
            raise ValueError("observation weights must be >= 0")


@dataclass
class ObjectiveSpec:
    """Everything needed to score a parameter vector against the record.

    scale:        overall scaling factor applied to the whole objective
    reg_weight:   weight of the prior-distance penalty
    obs_weights:  diagonal data weights, one per observed value
    param_weights: diagonal prior weights, one per parameter
    prior:        prior parameter estimate (the case starting vector)
    tolerance:    objective value below which the problem counts as solved
    """

    scale: float
    reg_weight: float
    obs_weights: np.ndarray
    param_weights: np.ndarray
    prior: np.ndarray
    tolerance: float
    observations: ObservationSeries

    def __post_init__(self):
        self.obs_weights = np.asarray(self.obs_weights, dtype=np.float64).ravel()
        self.param_weights = np.asarray(self.param_weights, dtype=np.float64).ravel()
        self.prior = np.asarray(self.prior, dtype=np.float64).ravel()
        if self.scale <= 0:
            raise ValueError("scale must be > 0")
        if self.reg_weight < 0:
            raise ValueError("reg_weight must be >= 0")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be > 0")
        if np.any(self.obs_weights < 0) or np.any(self.param_weights < 0):
            raise ValueError("diagonal weights must be >= 0")
        if self.obs_weights.size != self.observations.values.size:
            raise ValueError("obs_weights length must match the observation record")
        if self.param_weights.size != self.prior.size:
            raise ValueError("param_weights length must match the prior vector")


def evaluate_objective(u: np.ndarray, simulated: np.ndarray, spec: ObjectiveSpec) -> float:
    """Weighted squared mismatch plus weighted prior distance, scaled.

    F = scale * [ (q - q_hat)^T C_q (q - q_hat)
                  + reg_weight * (u - prior)^T C_u (u - prior) ]
    """
    u = np.asarray(u, dtype=np.float64).ravel()
    simulated = np.asarray(simulated, dtype=np.float64).ravel()
    if simulated.size != spec.observations.values.size:
        raise ValueError(
            f"simulated series has length {simulated.size}, record has {spec.observations.values.size}"
        )
    if u.size != spec.prior.size:
        raise ValueError(f"parameter vector has length {u.size}, prior has {spec.prior.size}")
    dq = spec.observations.values - simulated
    du = u - spec.prior
    data_term = float(np.dot(dq * spec.obs_weights, dq))
    reg_term = float(np.dot(du * spec.param_weights, du))
    return spec.scale * (data_term + spec.reg_weight * reg_term)


def step_reward(f_prev: float, f_new: float) -> float:
    """Reward for one action: the decrease of the objective it produced."""
    return f_prev - f_new


@dataclass(frozen=True)
class RewardConfig:
    """Terminal bonuses added on top of the step reward."""

    solved: float
    diverged: float
    timed_out: float

    def __post_init__(self):
        if self.solved < 0:
            raise ValueError("solved bonus must be >= 0")
        if self.diverged > 0 or self.timed_out > 0:
            raise ValueError("diverged/timed_out penalties must be <= 0")


def terminal_reward(outcome: str, cfg: RewardConfig) -> float:
    """Fixed bonus for the final transition of an episode; zero while running."""
    if outcome == SOLVED:
        return cfg.solved
    if outcome == DIVERGED:
        return cfg.diverged
    if outcome == TIMED_OUT:
        return cfg.timed_out
    if outcome in (RUNNING, FAILED):
        return 0.0
    raise ValueError(f"unknown termination outcome {outcome!r}")
