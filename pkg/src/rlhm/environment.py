"""The sequential decision process around the forward model.

An environment owns the current parameter vector.  Each step clamps the
requested per-entry change to the configured bound, floors the new state
at zero, runs one simulation, scores the mismatch and hands back the
reward.  Episodes end when the objective drops below tolerance, grows
past a multiple of its starting value, or the step cap is hit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import objective as obj
from .objective import RewardConfig, evaluate_objective, step_reward, terminal_reward
from .simulator import FiniteVolumeModel, SimulationError, extract_observation


@dataclass(frozen=True)
class EnvConfig:
    """Action bounds and termination rules.

    action_bound is one positive bound per parameter block (kx, ky, kz):
    in additive mode the per-entry change is clamped to [-bound, +bound];
    in multiplicative mode the per-entry factor is clamped to
    [1 - bound_mult, 1 + bound_mult].
    """

    action_bound: tuple[float, float, float]
    rewards: RewardConfig
    max_steps: int = 100
    divergence_factor: float = 2.0
    action_mode: str = "additive"
    action_bound_mult: tuple[float, float, float] = (0.1, 0.1, 0.1)
    bootstrap_on_timeout: bool = False

    def __post_init__(self):
        if any(b <= 0 for b in self.action_bound):
            raise ValueError("action bounds must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.divergence_factor <= 1:
            raise ValueError("divergence factor must be > 1")
        if self.action_mode not in ("additive", "multiplicative"):
            raise ValueError(f"unknown action mode {self.action_mode!r}")
        if any(not 0 < b < 1 for b in self.action_bound_mult):
            raise ValueError("multiplicative bounds must lie in (0, 1)")


@dataclass
class Transition:
    """One environment step as seen by the learner."""

    state: np.ndarray
    action: np.ndarray
    log_prob: float
    reward: float
    done: bool
    outcome: str
    value: float
    objective: float
    new_state: np.ndarray
    failed: bool = False
    series: object = None  # simulated series, attached only when solved


def _expand_per_entry(bounds: tuple[float, float, float], n_entries: int) -> np.ndarray:
    if n_entries % 3 != 0:
        raise ValueError("state length must be divisible by the three blocks")
    return np.repeat(np.asarray(bounds, dtype=np.float64), n_entries // 3)


def apply_action(state: np.ndarray, raw_action: np.ndarray, cfg: EnvConfig) -> np.ndarray:
    """Clamp the raw action and apply it, flooring the state at zero."""
    state = np.asarray(state, dtype=np.float64)
    raw_action = np.asarray(raw_action, dtype=np.float64)
    if raw_action.shape != state.shape:
        raise ValueError(f"action shape {raw_action.shape} != state shape {state.shape}")
    if cfg.action_mode == "additive":
        bound = _expand_per_entry(cfg.action_bound, state.size)
        delta = np.clip(raw_action, -bound, bound)
        return np.maximum(state + delta, 0.0)
    bound = _expand_per_entry(cfg.action_bound_mult, state.size)
    factor = np.clip(1.0 + raw_action * bound, 1.0 - bound, 1.0 + bound)
    return state * factor


def classify_termination(f_t: float, f0: float, steps: int, cfg: EnvConfig, tolerance: float) -> str:
    """Solved beats diverged beats timed out; otherwise the episode runs on."""
    if f_t < tolerance:
        return obj.SOLVED
    if f_t > cfg.divergence_factor * f0:
        return obj.DIVERGED
    if steps >= cfg.max_steps:
        return obj.TIMED_OUT
    return obj.RUNNING


class HistoryMatchEnv:
    """One serial environment over a case; safe to run many instances concurrently.

    The environment performs exactly one forward simulation per step and
    exposes matching counters (`steps_taken`, `sim_calls`) so run-level
    accounting can be audited.  After a terminal step it resets itself
    before the next step; `observe()` makes that reset happen eagerly and
    returns the state the next action will act on.
    """

    def __init__(self, case, cfg: EnvConfig, model=None, workspace: Path | str | None = None,
                 env_id: int = 0):
        self.case = case
        self.cfg = cfg
        self.env_id = env_id
        self.model = model if model is not None else FiniteVolumeModel(case.grid)
        self.schedule = case.schedule
        self.objective_spec = case.objective
        self.f0 = float(case.f0)
        self.sim_calls = 0
        self.steps_taken = 0
        self.failed_steps = 0
        self.episode_index = 0
        self._episode_steps = 0
        self._f_prev = self.f0
        self._state = np.asarray(case.start, dtype=np.float64).copy()
        self._needs_reset = False
        self._log_writer = None
        self._log_file = None
        if workspace is not None:
            ws = Path(workspace)
            ws.mkdir(parents=True, exist_ok=True)
            path = ws / "episodes.csv"
            new_file = not path.exists()
            self._log_file = open(path, "a", newline="")
            self._log_writer = csv.writer(self._log_file)
            if new_file:
                self._log_writer.writerow(["step", "F_t", "r_t", "outcome"])

    # -- state access --------------------------------------------------

    @property
    def state(self) -> np.ndarray:
        return self._state

    def observe(self) -> np.ndarray:
        """State the next action will be applied to (reset first if pending)."""
        if self._needs_reset:
            self.reset()
        return self._state.copy()

    def reset(self) -> np.ndarray:
        if self.steps_taken > 0:
            self.episode_index += 1
        self._state = np.asarray(self.case.start, dtype=np.float64).copy()
        self._episode_steps = 0
        self._f_prev = self.f0
        self._needs_reset = False
        return self._state.copy()

    # -- stepping ------------------------------------------------------

    def step(self, raw_action: np.ndarray, log_prob: float = 0.0, value: float = 0.0) -> Transition:
        if self._needs_reset:
            self.reset()
        state_before = self._state.copy()
        new_state = apply_action(self._state, raw_action, self.cfg)
        self.sim_calls += 1
        try:
            series = self.model.simulate(new_state, self.schedule)
        except SimulationError:
            self.failed_steps += 1
            self._log(self._episode_steps + 1, float("nan"), float("nan"), obj.FAILED)
            self.reset()
            return Transition(
                state=state_before,
                action=np.asarray(raw_action, dtype=np.float64).copy(),
                log_prob=log_prob,
                reward=0.0,
                done=True,
                outcome=obj.FAILED,
                value=value,
                objective=float("nan"),
                new_state=state_before,
                failed=True,
            )
        q_hat = extract_observation(series, self.objective_spec.observations.spec)
        f_t = evaluate_objective(new_state, q_hat, self.objective_spec)
        self._episode_steps += 1
        self.steps_taken += 1
        outcome = classify_termination(
            f_t, self.f0, self._episode_steps, self.cfg, self.objective_spec.tolerance
        )
        reward = step_reward(self._f_prev, f_t) + terminal_reward(outcome, self.cfg.rewards)
        done = outcome != obj.RUNNING
        self._log(self._episode_steps, f_t, reward, outcome)
        self._state = new_state
        self._f_prev = f_t
        if done:
            self._needs_reset = True
        return Transition(
            state=state_before,
            action=np.asarray(raw_action, dtype=np.float64).copy(),
            log_prob=log_prob,
            reward=reward,
            done=done,
            outcome=outcome,
            value=value,
            objective=f_t,
            new_state=new_state,
            series=series if outcome == obj.SOLVED else None,
        )

    def _log(self, step, f_t, reward, outcome):
        if self._log_writer is None:
            return
        if outcome == obj.FAILED:
            self._log_writer.writerow([step, "nan", "nan", outcome])
        else:
            self._log_writer.writerow([step, repr(float(f_t)), repr(float(reward)), outcome])
        self._log_file.flush()

    # -- checkpointing -------------------------------------------------

    def get_state(self) -> dict:
        return {
            "state": self._state.copy(),
            "f_prev": self._f_prev,
            "episode_steps": self._episode_steps,
            "needs_reset": self._needs_reset,
            "sim_calls": self.sim_calls,
            "steps_taken": self.steps_taken,
            "failed_steps": self.failed_steps,
            "episode_index": self.episode_index,
        }

    def set_state(self, snapshot: dict):
        self._state = np.asarray(snapshot["state"], dtype=np.float64).copy()
        self._f_prev = float(snapshot["f_prev"])
        self._episode_steps = int(snapshot["episode_steps"])
        self._needs_reset = bool(snapshot["needs_reset"])
        self.sim_calls = int(snapshot["sim_calls"])
        self.steps_taken = int(snapshot["steps_taken"])
        self.failed_steps = int(snapshot["failed_steps"])
        self.episode_index = int(snapshot["episode_index"])

    def close(self):
        if self._log_file is not None:
            self._log_file.close()
            self._log_file = None
            self._log_writer = None
