"""Bulk-synchronous training across N concurrent environments.

Each iteration broadcasts an immutable policy snapshot to N worker
processes, collects batch/N transitions from each, computes returns and
standardized advantages over the whole batch, runs one clipped-surrogate
update, and archives any solved states.  Workers own their environments
for the whole run, so episodes continue across batch boundaries.
"""

from __future__ import annotations

import json
import multiprocessing as mp
import time
import traceback
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import objective as obj
from .agent import (
    ActorCritic,
    PolicySnapshot,
    PpoConfig,
    compute_returns_advantages,
    sample_action,
    standardize,
    value_estimate,
)
from .case import Case, read_case
from .checkpoint import CheckpointError, load_container, save_container
from .environment import EnvConfig, HistoryMatchEnv
from .simulator import SimulationError, extract_observation

TRAINING_STATE_FORMAT = "rlhm-training-state"


# ---------------------------------------------------------------------------
# Rollout collection (used in-process by tests and inside workers)
# ---------------------------------------------------------------------------

def collect_segment(env: HistoryMatchEnv, snapshot: PolicySnapshot, rng: np.random.Generator,
                    n_steps: int, max_retries: int = 10) -> dict:
    """Advance one environment n_steps under a frozen policy.

    A failed simulation resets the environment and the step is re-taken
    with a fresh action; the failure is counted.  Returns plain arrays so
    the result crosses process boundaries cheaply.
    """
    dim = env.case.start.size
    states = np.empty((n_steps, dim))
    actions = np.empty((n_steps, dim))
    log_probs = np.empty(n_steps)
    rewards = np.empty(n_steps)
    dones = np.zeros(n_steps, dtype=bool)
    values = np.empty(n_steps)
    next_values = np.empty(n_steps)
    objectives = np.empty(n_steps)
    outcomes = []
    solved = []
    failures = 0
    obs_spec = env.objective_spec.observations.spec
    for t in range(n_steps):
        transition = None
        for _ in range(max_retries + 1):
            s = env.observe()
            a, logp = sample_action(snapshot, s, rng)
            v = float(value_estimate(snapshot.critic, s)[0])
            tr = env.step(a, logp, v)
            if not tr.failed:
                transition = tr
                break
            failures += 1
        if transition is None:
            raise SimulationError(f"environment {env.env_id} failed {max_retries} times in a row")
        states[t] = transition.state
        actions[t] = transition.action
        log_probs[t] = transition.log_prob
        rewards[t] = transition.reward
        dones[t] = transition.done
        values[t] = transition.value
        next_values[t] = float(value_estimate(snapshot.critic, transition.new_state)[0])
        objectives[t] = transition.objective
        outcomes.append(transition.outcome)
        if transition.outcome == obj.SOLVED:
            solved.append(
                {
                    "vector": transition.new_state.copy(),
                    "objective": float(transition.objective),
                    "position": t,
                    "series_times": transition.series.times_days.copy(),
                    "series_values": extract_observation(transition.series, obs_spec),
                }
            )
    return {
        "states": states,
        "actions": actions,
        "log_probs": log_probs,
        "rewards": rewards,
        "dones": dones,
        "values": values,
        "next_values": next_values,
        "objectives": objectives,
        "outcomes": outcomes,
        "solved": solved,
        "failures": failures,
        "sim_calls": env.sim_calls,
        "steps_taken": env.steps_taken,
        "failed_steps": env.failed_steps,
    }


def _env_worker(conn, case, env_cfg, seed_seq, env_id, workspace):
    env = HistoryMatchEnv(case, env_cfg, workspace=workspace, env_id=env_id)
    rng = np.random.default_rng(seed_seq)
    try:
        while True:
            try:
                msg = conn.recv()
            except EOFError:
                break
            cmd = msg[0]
            try:
                if cmd == "collect":
                    _, snapshot, n_steps = msg
                    conn.send(("ok", collect_segment(env, snapshot, rng, n_steps)))
                elif cmd == "get_state":
                    state = env.get_state()
                    state["rng"] = rng.bit_generator.state
                    conn.send(("ok", state))
                elif cmd == "set_state":
                    state = dict(msg[1])
                    rng.bit_generator.state = state.pop("rng")
                    env.set_state(state)
                    conn.send(("ok", None))
                elif cmd == "close":
                    conn.send(("ok", None))
                    break
                else:
                    conn.send(("error", f"unknown worker command {cmd!r}"))
            except Exception:
                conn.send(("error", traceback.format_exc()))
    finally:
        env.close()
        conn.close()


# ---------------------------------------------------------------------------
# Rollout batch
# ---------------------------------------------------------------------------

@dataclass
class RolloutBatch:
    """Transitions from all environments, env-major, plus per-env tails."""

    states: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    values: np.ndarray
    next_values: np.ndarray
    objectives: np.ndarray
    outcomes: list
    n_envs: int
    steps_per_env: int

    @classmethod
    def from_segments(cls, segments: list) -> "RolloutBatch":
        n_envs = len(segments)
        steps = segments[0]["states"].shape[0]
        cat = lambda key: np.concatenate([seg[key] for seg in segments])
        outcomes = []
        for seg in segments:
            outcomes.extend(seg["outcomes"])
        return cls(
            states=cat("states"),
            actions=cat("actions"),
            log_probs=cat("log_probs"),
            rewards=cat("rewards"),
            dones=cat("dones"),
            values=cat("values"),
            next_values=cat("next_values"),
            objectives=cat("objectives"),
            outcomes=outcomes,
            n_envs=n_envs,
            steps_per_env=steps,
        )

    def prepare(self, ppo: PpoConfig):
        """Per-env discounted returns, batch-standardized advantages."""
        returns = np.empty_like(self.rewards)
        advantages = np.empty_like(self.rewards)
        t = self.steps_per_env
        for e in range(self.n_envs):
            sl = slice(e * t, (e + 1) * t)
            returns[sl], advantages[sl] = compute_returns_advantages(
                self.rewards[sl],
                self.dones[sl],
                self.values[sl],
                ppo.discount,
                next_values=self.next_values[sl],
                outcomes=self.outcomes[sl],
                bootstrap_on_timeout=ppo.bootstrap_on_timeout,
                bootstrap_truncation=ppo.bootstrap_truncation,
            )
        return returns, advantages, standardize(advantages)


# ---------------------------------------------------------------------------
# Solution archive
# ---------------------------------------------------------------------------

@dataclass
class SolutionEntry:
    vector: np.ndarray
    objective: float
    env_id: int
    global_step: int
    series_times: np.ndarray
    series_values: np.ndarray


def relative_distance(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b)) / denom


class SolutionArchive:
    """Distinct matched parameter vectors, persisted as they arrive."""

    def __init__(self, tolerance: float, threshold: float = 0.01, directory: Path | None = None):
        self.tolerance = tolerance
        self.threshold = threshold
        self.directory = Path(directory) if directory is not None else None
        self.entries: list[SolutionEntry] = []
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)

    def add(self, vector, objective, env_id, global_step, series_times, series_values) -> bool:
        """Accept iff below tolerance and at least `threshold` relative L2
        distance (inclusive) from every archived vector."""
        vector = np.asarray(vector, dtype=np.float64)
        if not objective < self.tolerance:
            raise ValueError(f"solution objective {objective} is not below {self.tolerance}")
        for entry in self.entries:
            if relative_distance(vector, entry.vector) < self.threshold:
                return False
        entry = SolutionEntry(
            vector=vector.copy(),
            objective=float(objective),
            env_id=int(env_id),
            global_step=int(global_step),
            series_times=np.asarray(series_times, dtype=np.float64).copy(),
            series_values=np.asarray(series_values, dtype=np.float64).copy(),
        )
        self.entries.append(entry)
        self._persist(entry, len(self.entries) - 1)
        return True

    def _persist(self, entry: SolutionEntry, index: int):
        if self.directory is None:
            return
        doc = {
            "format": "rlhm-solution",
            "version": 1,
            "objective": entry.objective,
            "env_id": entry.env_id,
            "global_step": entry.global_step,
            "vector": entry.vector.tolist(),
            "series_times": entry.series_times.tolist(),
            "series_values": entry.series_values.tolist(),
        }
        path = self.directory / f"sol_{index}.case-params"
        try:
            path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        except OSError as err:
            raise RuntimeError(f"could not persist solution {index}: {err}") from err

    def __len__(self) -> int:
        return len(self.entries)


def archive_solution(archive: SolutionArchive, vector, objective, metadata: dict) -> bool:
    return archive.add(
        vector,
        objective,
        metadata.get("env_id", -1),
        metadata.get("global_step", -1),
        metadata.get("series_times", np.array([])),
        metadata.get("series_values", np.array([])),
    )


# ---------------------------------------------------------------------------
# Run configuration and report
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    case_path: str
    n_envs: int = 1
    batch_size: int = 32
    budget: int = 0
    seed: int = 0
    workspace_root: str | None = None
    run_name: str | None = None
    checkpoint_every: int = 0
    resume_from: str | None = None
    solution_target: int | None = None
    distinct_threshold: float = 0.01
    ppo: PpoConfig = field(default_factory=PpoConfig)
    env_overrides: dict = field(default_factory=dict)
    progress: bool = False

    def __post_init__(self):
        if self.n_envs < 1:
            raise ValueError("need at least one environment")
        if self.batch_size < self.n_envs:
            raise ValueError("batch size must be >= number of environments")
        if self.batch_size % self.n_envs != 0:
            raise ValueError("batch size must be divisible by the number of environments")
        if self.budget < 0:
            raise ValueError("budget must be >= 0")


@dataclass
class TrainingReport:
    run_dir: str
    iterations: list
    global_step: int
    sims_total: int
    solutions_found: int
    failures: int
    aborted_updates: int
    wall_collect_s: float
    wall_update_s: float
    wall_total_s: float
    final_checkpoint: str | None = None


METRICS_COLUMNS = (
    "iteration",
    "global_step",
    "mean_reward",
    "policy_loss",
    "value_loss",
    "clip_fraction",
    "sims_total",
)
TIMINGS_COLUMNS = ("iteration", "wall_ms_collect", "wall_ms_update")


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------

class Trainer:
    """Owns the agent, the worker pool and the run workspace for one run."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self._restore = None
        if cfg.resume_from:
            arrays, meta = load_container(cfg.resume_from)
            if meta.get("format") != TRAINING_STATE_FORMAT:
                raise CheckpointError("not a training-state checkpoint")
            self._restore = (arrays, meta)
            cfg = replace(
                cfg,
                case_path=meta["case_path"],
                n_envs=meta["n_envs"],
                batch_size=meta["batch_size"],
                seed=meta["seed"],
                distinct_threshold=meta["distinct_threshold"],
                ppo=PpoConfig(**{**meta["ppo"], "hidden_sizes": tuple(meta["ppo"]["hidden_sizes"])}),
                env_overrides=meta["env_overrides"],
            )
            self.cfg = cfg

        self.case: Case = read_case(cfg.case_path)
        self.env_cfg = self._build_env_config()
        ppo = cfg.ppo
        if ppo.input_scale is None:
            rms = float(np.sqrt(np.mean(np.square(self.case.start))))
            ppo = replace(ppo, input_scale=max(rms, 1.0))
        ppo = replace(ppo, bootstrap_on_timeout=self.env_cfg.bootstrap_on_timeout)
        self.ppo = ppo

        ss = np.random.SeedSequence(cfg.seed)
        children = ss.spawn(2 + cfg.n_envs)
        self._agent_seed = children[0]
        self._env_seeds = children[2:]

        dim = self.case.start.size
        self.agent = ActorCritic(dim, self.ppo, seed=self._agent_seed)
        self.iteration = 0
        self.global_step = 0
        self.failures = 0
        self.aborted_updates = 0

        self.run_dir = self._resolve_run_dir()
        self.archive = SolutionArchive(
            tolerance=self.case.objective.tolerance,
            threshold=cfg.distinct_threshold,
            directory=self.run_dir / "solutions",
        )
        self._workers = []
        self._conns = []

        if self._restore is not None:
            self._load_training_state(*self._restore)

    # -- setup ----------------------------------------------------------

    def _build_env_config(self) -> EnvConfig:
        d = self.case.env_defaults
        merged = {
            "action_bound": tuple(d.action_bound),
            "max_steps": d.max_steps,
            "divergence_factor": d.divergence_factor,
            "rewards": d.reward_config(),
            "action_mode": "additive",
            "bootstrap_on_timeout": False,
        }
        merged.update(self.cfg.env_overrides)
        if not isinstance(merged["rewards"], obj.RewardConfig):
            merged["rewards"] = obj.RewardConfig(**merged["rewards"])
        merged["action_bound"] = tuple(merged["action_bound"])
        return EnvConfig(**merged)

    def _resolve_run_dir(self) -> Path:
        import os

        root = self.cfg.workspace_root or os.environ.get("RLHM_WORKSPACE") or "runs"
        name = self.cfg.run_name or time.strftime("run_%Y%m%d-%H%M%S")
        run_dir = Path(root) / name
        run_dir.mkdir(parents=True, exist_ok=True)
        return run_dir

    def _write_config_snapshot(self):
        doc = {
            "case_path": str(self.cfg.case_path),
            "case_name": self.case.name,
            "n_envs": self.cfg.n_envs,
            "batch_size": self.cfg.batch_size,
            "budget": self.cfg.budget,
            "seed": self.cfg.seed,
            "solution_target": self.cfg.solution_target,
            "distinct_threshold": self.cfg.distinct_threshold,
            "checkpoint_every": self.cfg.checkpoint_every,
            "resumed_from": str(self.cfg.resume_from) if self.cfg.resume_from else None,
            "ppo": {**asdict(self.ppo), "hidden_sizes": list(self.ppo.hidden_sizes)},
            "env": {
                "action_bound": list(self.env_cfg.action_bound),
                "max_steps": self.env_cfg.max_steps,
                "divergence_factor": self.env_cfg.divergence_factor,
                "action_mode": self.env_cfg.action_mode,
                "rewards": asdict(self.env_cfg.rewards),
                "bootstrap_on_timeout": self.env_cfg.bootstrap_on_timeout,
            },
            "simulator_partitions": 1,
            "seed_split": "SeedSequence(seed).spawn(2 + n_envs): [agent, reserved, env_0..]",
        }
        (self.run_dir / "config.snapshot").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def _start_workers(self):
        ctx = mp.get_context("fork")
        for env_id in range(self.cfg.n_envs):
            parent, child = ctx.Pipe()
            proc = ctx.Process(
                target=_env_worker,
                args=(
                    child,
                    self.case,
                    self.env_cfg,
                    self._env_seeds[env_id],
                    env_id,
                    self.run_dir / f"env_{env_id}",
                ),
                daemon=True,
            )
            proc.start()
            child.close()
            self._workers.append(proc)
            self._conns.append(parent)

    def _stop_workers(self):
        for conn in self._conns:
            try:
                conn.send(("close",))
            except (BrokenPipeError, OSError):
                pass
        for conn in self._conns:
            try:
                conn.recv()
            except (EOFError, OSError):
                pass
            conn.close()
        for proc in self._workers:
            proc.join(timeout=10)
            if proc.is_alive():
                proc.terminate()
        self._workers = []
        self._conns = []

    def _ask(self, conn, message):
        conn.send(message)
        status, payload = conn.recv()
        if status != "ok":
            raise RuntimeError(f"environment worker failed:\n{payload}")
        return payload

    # -- checkpointing ----------------------------------------------------

    def _training_state(self):
        arrays = dict(self.agent.state_arrays())
        env_meta = []
        for env_id, conn in enumerate(self._conns):
            state = self._ask(conn, ("get_state",))
            arrays[f"env/{env_id}/state"] = state.pop("state")
            env_meta.append(state)
        for idx, entry in enumerate(self.archive.entries):
            arrays[f"archive/{idx}/vector"] = entry.vector
            arrays[f"archive/{idx}/series_times"] = entry.series_times
            arrays[f"archive/{idx}/series_values"] = entry.series_values
        meta = {
            "format": TRAINING_STATE_FORMAT,
            "case_path": str(self.cfg.case_path),
            "n_envs": self.cfg.n_envs,
            "batch_size": self.cfg.batch_size,
            "seed": self.cfg.seed,
            "budget": self.cfg.budget,
            "distinct_threshold": self.cfg.distinct_threshold,
            "env_overrides": self.cfg.env_overrides,
            "ppo": {**asdict(self.ppo), "hidden_sizes": list(self.ppo.hidden_sizes)},
            "agent": self.agent.state_meta(),
            "iteration": self.iteration,
            "global_step": self.global_step,
            "failures": self.failures,
            "aborted_updates": self.aborted_updates,
            "envs": env_meta,
            "archive": [
                {"objective": e.objective, "env_id": e.env_id, "global_step": e.global_step}
                for e in self.archive.entries
            ],
        }
        return arrays, meta

    def save_checkpoint(self, path: Path | str):
        arrays, meta = self._training_state()
        save_container(path, arrays, meta)

    def _load_training_state(self, arrays, meta):
        self.agent.load_state(arrays, meta["agent"])
        self.iteration = int(meta["iteration"])
        self.global_step = int(meta["global_step"])
        self.failures = int(meta["failures"])
        self.aborted_updates = int(meta["aborted_updates"])
        self.archive.entries = []
        for idx, entry_meta in enumerate(meta["archive"]):
            entry = SolutionEntry(
                vector=arrays[f"archive/{idx}/vector"],
                objective=entry_meta["objective"],
                env_id=entry_meta["env_id"],
                global_step=entry_meta["global_step"],
                series_times=arrays[f"archive/{idx}/series_times"],
                series_values=arrays[f"archive/{idx}/series_values"],
            )
            self.archive.entries.append(entry)
            self.archive._persist(entry, idx)
        self._env_restore = [
            {**env_meta, "state": arrays[f"env/{env_id}/state"]}
            for env_id, env_meta in enumerate(meta["envs"])
        ]

    # -- the loop ---------------------------------------------------------

    def run(self) -> TrainingReport:
        cfg = self.cfg
        t_start = time.perf_counter()
        self._write_config_snapshot()
        metrics_rows = []
        wall_collect = 0.0
        wall_update = 0.0
        final_ckpt = None

        metrics_path = self.run_dir / "metrics.csv"
        timings_path = self.run_dir / "timings.csv"
        fresh = self.iteration == 0
        metrics_file = open(metrics_path, "w" if fresh else "a", newline="")
        timings_file = open(timings_path, "w" if fresh else "a", newline="")
        if fresh:
            metrics_file.write(",".join(METRICS_COLUMNS) + "\n")
            timings_file.write(",".join(TIMINGS_COLUMNS) + "\n")

        steps_per_env = cfg.batch_size // cfg.n_envs
        try:
            if self.global_step + cfg.batch_size <= cfg.budget and not self._target_met():
                self._start_workers()
                if self._restore is not None:
                    for conn, state in zip(self._conns, self._env_restore):
                        self._ask(conn, ("set_state", state))

            while self.global_step + cfg.batch_size <= cfg.budget and not self._target_met():
                t0 = time.perf_counter()
                snapshot = self.agent.policy_snapshot()
                for conn in self._conns:
                    conn.send(("collect", snapshot, steps_per_env))
                segments = []
                for conn in self._conns:
                    status, payload = conn.recv()
                    if status != "ok":
                        raise RuntimeError(f"environment worker failed:\n{payload}")
                    segments.append(payload)
                t1 = time.perf_counter()

                batch = RolloutBatch.from_segments(segments)
                returns, advantages, adv_std = batch.prepare(self.ppo)
                metrics = self.agent.ppo_update(
                    batch.states, batch.actions, batch.log_probs, returns, adv_std
                )
                t2 = time.perf_counter()

                if metrics.aborted:
                    self.aborted_updates += 1

                step_before = self.global_step
                self.iteration += 1
                self.global_step += cfg.batch_size
                self.failures = sum(seg["failed_steps"] for seg in segments)
                sims_total = sum(seg["sim_calls"] for seg in segments)
                for env_id, seg in enumerate(segments):
                    for sol in seg["solved"]:
                        global_step = step_before + env_id * steps_per_env + sol["position"] + 1
                        self.archive.add(
                            sol["vector"],
                            sol["objective"],
                            env_id,
                            global_step,
                            sol["series_times"],
                            sol["series_values"],
                        )

                row = {
                    "iteration": self.iteration,
                    "global_step": self.global_step,
                    "mean_reward": float(batch.rewards.mean()),
                    "policy_loss": metrics.policy_loss,
                    "value_loss": metrics.value_loss,
                    "clip_fraction": metrics.clip_fraction,
                    "sims_total": sims_total,
                }
                metrics_rows.append(row)
                metrics_file.write(",".join(_fmt(row[c]) for c in METRICS_COLUMNS) + "\n")
                metrics_file.flush()
                timings_file.write(
                    f"{self.iteration},{(t1 - t0) * 1e3:.3f},{(t2 - t1) * 1e3:.3f}\n"
                )
                timings_file.flush()
                wall_collect += t1 - t0
                wall_update += t2 - t1
                if cfg.progress:
                    print(
                        f"iter {self.iteration} step {self.global_step} "
                        f"reward {row['mean_reward']:.3g} solutions {len(self.archive)}"
                    )

                if cfg.checkpoint_every and self.iteration % cfg.checkpoint_every == 0:
                    ckpt = self.run_dir / "checkpoints" / f"ckpt_iter{self.iteration}.rlhm"
                    ckpt.parent.mkdir(exist_ok=True)
                    self.save_checkpoint(ckpt)
                    final_ckpt = ckpt

            if self._workers:
                ckpt = self.run_dir / "checkpoints" / "ckpt_final.rlhm"
                ckpt.parent.mkdir(exist_ok=True)
                self.save_checkpoint(ckpt)
                final_ckpt = ckpt
        finally:
            self._stop_workers()
            metrics_file.close()
            timings_file.close()

        sims_total = metrics_rows[-1]["sims_total"] if metrics_rows else 0
        return TrainingReport(
            run_dir=str(self.run_dir),
            iterations=metrics_rows,
            global_step=self.global_step,
            sims_total=sims_total,
            solutions_found=len(self.archive),
            failures=self.failures,
            aborted_updates=self.aborted_updates,
            wall_collect_s=wall_collect,
            wall_update_s=wall_update,
            wall_total_s=time.perf_counter() - t_start,
            final_checkpoint=str(final_ckpt) if final_ckpt else None,
        )

    def _target_met(self) -> bool:
        target = self.cfg.solution_target
        return target is not None and len(self.archive) >= target


def run_training(cfg: RunConfig) -> TrainingReport:
    return Trainer(cfg).run()


def load_checkpoint_meta(path: Path | str) -> dict:
    _, meta = load_container(path)
    if meta.get("format") != TRAINING_STATE_FORMAT:
        raise CheckpointError("not a training-state checkpoint")
    return meta
