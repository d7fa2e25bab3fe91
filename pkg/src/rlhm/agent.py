"""Actor-critic with a diagonal-Gaussian policy and a clipped surrogate update.

The actor outputs the action mean; a learnable state-independent log-std
vector sets the exploration width.  Returns are plain discounted sums
truncated at episode ends, advantages subtract the critic estimate and
are standardized per batch before the policy loss.  Updates run several
epochs of shuffled minibatches through Adam.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import objective as obj
from .nets import (
    AdamState,
    MlpParams,
    adam_init,
    adam_step,
    clip_grad_norm,
    init_mlp,
    mlp_arrays,
    mlp_backward,
    mlp_forward,
    mlp_from_arrays,
    pack_arrays,
    unpack_arrays,
)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PpoConfig:
    clip_range: float = 0.2
    discount: float = 0.99
    value_coef: float = 0.5
    learning_rate: float = 9e-4
    epochs: int = 10
    minibatch_size: int | None = None  # None -> batch/4
    max_grad_norm: float | None = 0.5
    hidden_sizes: tuple[int, ...] = (128, 128)
    log_std_init: float = 0.0
    policy_out_gain: float = 0.01
    input_scale: float | None = None  # None -> resolved to the start-vector RMS
    bootstrap_truncation: bool = True
    bootstrap_on_timeout: bool = False

    def __post_init__(self):
        if not 0 < self.clip_range < 1:
            raise ValueError("clip_range must lie in (0, 1)")
        if not 0 < self.discount <= 1:
            raise ValueError("discount must lie in (0, 1]")
        if self.value_coef <= 0:
            raise ValueError("value_coef must be > 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class PolicySnapshot:
    """Immutable copy of the parameters a rollout worker needs."""

    actor: MlpParams
    log_std: np.ndarray
    critic: MlpParams


def gaussian_log_prob(actions: np.ndarray, means: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    """Diagonal-Gaussian log density, vectorized over the leading axis."""
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    z = (actions - means) * np.exp(-log_std)
    return -0.5 * (z * z).sum(axis=1) - log_std.sum() - 0.5 * actions.shape[1] * LOG_2PI


def sample_action(policy: PolicySnapshot, state: np.ndarray, rng: np.random.Generator):
    """Draw action = mean(state) + std * z and return it with its log density."""
    mean, _ = mlp_forward(policy.actor, state)
    noise = rng.standard_normal(mean.shape)
    action = mean + np.exp(policy.log_std) * noise
    log_prob = float(gaussian_log_prob(action, mean, policy.log_std)[0])
    return action, log_prob


def action_log_prob(policy: PolicySnapshot, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    means, _ = mlp_forward(policy.actor, np.atleast_2d(states))
    return gaussian_log_prob(actions, means, policy.log_std)


def value_estimate(critic: MlpParams, states: np.ndarray) -> np.ndarray:
    out, _ = mlp_forward(critic, np.atleast_2d(states))
    return out[:, 0]


# ---------------------------------------------------------------------------
# Returns and advantages
# ---------------------------------------------------------------------------

def compute_returns_advantages(
    rewards: np.ndarray,
    dones: np.ndarray,
    values: np.ndarray,
    discount: float,
    next_values: np.ndarray | None = None,
    outcomes=None,
    bootstrap_on_timeout: bool = False,
    bootstrap_truncation: bool = True,
):
    """Discounted returns truncated at episode ends, and raw advantages.

    A segment that stops mid-episode bootstraps its tail with the critic's
    estimate of the next state (``next_values``) unless that is disabled.
    Timed-out terminals are treated as true terminals by default; with
    ``bootstrap_on_timeout`` they bootstrap like truncations instead.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    values = np.asarray(values, dtype=np.float64)
    n = rewards.size
    if dones.size != n or values.size != n:
        raise ValueError("rewards, dones and values must have equal length")
    if next_values is None:
        next_values = np.zeros(n)
    else:
        next_values = np.asarray(next_values, dtype=np.float64)
    returns = np.empty(n)
    running = 0.0
    for t in range(n - 1, -1, -1):
        if dones[t]:
            tail = 0.0
            if bootstrap_on_timeout and outcomes is not None and outcomes[t] == obj.TIMED_OUT:
                tail = next_values[t]
            running = rewards[t] + discount * tail
        elif t == n - 1:
            tail = next_values[t] if bootstrap_truncation else 0.0
            running = rewards[t] + discount * tail
        else:
            running = rewards[t] + discount * running
        returns[t] = running
    return returns, returns - values


def standardize(advantages: np.ndarray) -> np.ndarray:
    std = advantages.std()
    return (advantages - advantages.mean()) / (std + 1e-8)


# ---------------------------------------------------------------------------
# The agent
# ---------------------------------------------------------------------------

@dataclass
class UpdateMetrics:
    policy_loss: float
    value_loss: float
    clip_fraction: float
    approx_kl: float
    n_updates: int
    aborted: bool = False


class ActorCritic:
    """Policy mean net, log-std vector and value net, updated jointly."""

    def __init__(self, dim: int, cfg: PpoConfig, seed=0):
        self.dim = dim
        self.cfg = cfg
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        init_ss, shuffle_ss = ss.spawn(2)
        rng = np.random.default_rng(init_ss)
        scale = cfg.input_scale if cfg.input_scale else 1.0
        sizes = [dim, *cfg.hidden_sizes, dim]
        self.actor = init_mlp(sizes, rng, out_gain=cfg.policy_out_gain, input_scale=scale)
        self.log_std = np.full(dim, cfg.log_std_init)
        self.critic = init_mlp([dim, *cfg.hidden_sizes, 1], rng, input_scale=scale)
        self.shuffle_rng = np.random.default_rng(shuffle_ss)
        self.adam = adam_init(self._pack().size)

    # -- parameter packing ----------------------------------------------

    def _all_arrays(self):
        return mlp_arrays(self.actor) + [self.log_std] + mlp_arrays(self.critic)

    def _pack(self) -> np.ndarray:
        return pack_arrays(self._all_arrays())

    def _unpack(self, vec: np.ndarray):
        arrays = unpack_arrays(vec, self._all_arrays())
        n_actor = 2 * len(self.actor.weights)
        self.actor = mlp_from_arrays(arrays[:n_actor])
        self.log_std = arrays[n_actor]
        self.critic = mlp_from_arrays(arrays[n_actor + 1 :])

    def policy_snapshot(self) -> PolicySnapshot:
        return PolicySnapshot(self.actor.copy(), self.log_std.copy(), self.critic.copy())

    def value(self, states: np.ndarray) -> np.ndarray:
        return value_estimate(self.critic, states)

    # -- loss -----------------------------------------------------------

    def _loss_terms(self, states, actions, old_log_probs, returns, advantages):
        """Forward pass of the total loss; returns intermediates for backward."""
        means, cache_a = mlp_forward(self.actor, states)
        new_log_probs = gaussian_log_prob(actions, means, self.log_std)
        ratio = np.exp(new_log_probs - old_log_probs)
        clipped = np.clip(ratio, 1.0 - self.cfg.clip_range, 1.0 + self.cfg.clip_range)
        surr_raw = ratio * advantages
        surr_clip = clipped * advantages
        policy_objective = np.minimum(surr_raw, surr_clip).mean()
        v, cache_c = mlp_forward(self.critic, states)
        v = v[:, 0]
        value_loss = np.mean((v - returns) ** 2)
        loss = -policy_objective + self.cfg.value_coef * value_loss
        return loss, {
            "means": means,
            "cache_a": cache_a,
            "new_log_probs": new_log_probs,
            "ratio": ratio,
            "surr_raw": surr_raw,
            "surr_clip": surr_clip,
            "v": v,
            "cache_c": cache_c,
            "policy_objective": policy_objective,
            "value_loss": value_loss,
        }

    def loss(self, states, actions, old_log_probs, returns, advantages) -> float:
        value, _ = self._loss_terms(states, actions, old_log_probs, returns, advantages)
        return float(value)

    def loss_and_grads(self, states, actions, old_log_probs, returns, advantages):
        """Total loss and its gradient w.r.t. the packed parameter vector."""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        n = states.shape[0]
        loss, ctx = self._loss_terms(states, actions, old_log_probs, returns, advantages)

        # Policy part: d(-mean(min(surr_raw, surr_clip)))/d log_prob.  The
        # clipped branch has zero gradient outside the clip window, and inside
        # it the two branches coincide, so only the raw branch carries one.
        use_raw = ctx["surr_raw"] <= ctx["surr_clip"]
        d_log_prob = np.where(use_raw, -advantages * ctx["ratio"] / n, 0.0)
        std_inv = np.exp(-self.log_std)
        z = (actions - ctx["means"]) * std_inv
        d_means = d_log_prob[:, None] * z * std_inv  # d logp / d mean = z / std
        d_log_std = (d_log_prob[:, None] * (z * z - 1.0)).sum(axis=0)
        actor_grads = mlp_backward(self.actor, ctx["cache_a"], d_means)

        d_v = self.cfg.value_coef * 2.0 * (ctx["v"] - returns) / n
        critic_grads = mlp_backward(self.critic, ctx["cache_c"], d_v[:, None])

        grads = pack_arrays(mlp_arrays(actor_grads) + [d_log_std] + mlp_arrays(critic_grads))
        return float(loss), grads, ctx

    # -- update -----------------------------------------------------------

    def ppo_update(self, states, actions, old_log_probs, returns, advantages) -> UpdateMetrics:
        """Several epochs of shuffled-minibatch clipped-surrogate steps.

        On a non-finite loss or gradient the update is rolled back to the
        parameters it started from and reported as aborted.
        """
        cfg = self.cfg
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        n = states.shape[0]
        mb = cfg.minibatch_size or max(n // 4, 1)
        backup_params = self._pack()
        backup_adam = self.adam.copy()
        backup_shuffle = self.shuffle_rng.bit_generator.state

        pol_losses, val_losses, clip_fracs, kls = [], [], [], []
        n_updates = 0
        for _ in range(cfg.epochs):
            order = self.shuffle_rng.permutation(n)
            for start in range(0, n, mb):
                idx = order[start : start + mb]
                loss, grads, ctx = self.loss_and_grads(
                    states[idx], actions[idx], old_log_probs[idx], returns[idx], advantages[idx]
                )
                if not (np.isfinite(loss) and np.all(np.isfinite(grads))):
                    self._unpack(backup_params)
                    self.adam = backup_adam
                    self.shuffle_rng.bit_generator.state = backup_shuffle
                    return UpdateMetrics(
                        policy_loss=float("nan"),
                        value_loss=float("nan"),
                        clip_fraction=0.0,
                        approx_kl=float("nan"),
                        n_updates=n_updates,
                        aborted=True,
                    )
                if cfg.max_grad_norm is not None:
                    grads = clip_grad_norm(grads, cfg.max_grad_norm)
                self._unpack(adam_step(self._pack(), grads, self.adam, cfg.learning_rate))
                n_updates += 1
                pol_losses.append(-ctx["policy_objective"])
                val_losses.append(ctx["value_loss"])
                clip_fracs.append(float(np.mean(np.abs(ctx["ratio"] - 1.0) > cfg.clip_range)))
                kls.append(float(np.mean(old_log_probs[idx] - ctx["new_log_probs"])))
        return UpdateMetrics(
            policy_loss=float(np.mean(pol_losses)),
            value_loss=float(np.mean(val_losses)),
            clip_fraction=float(np.mean(clip_fracs)),
            approx_kl=float(np.mean(kls)),
            n_updates=n_updates,
        )

    # -- checkpointing ----------------------------------------------------

    def state_arrays(self) -> dict:
        arrays = {}
        for prefix, params in (("actor", self.actor), ("critic", self.critic)):
            for layer, (w, b) in enumerate(zip(params.weights, params.biases)):
                arrays[f"agent/{prefix}/w{layer}"] = w
                arrays[f"agent/{prefix}/b{layer}"] = b
        arrays["agent/log_std"] = self.log_std
        arrays["agent/adam/m"] = self.adam.m
        arrays["agent/adam/v"] = self.adam.v
        return arrays

    def state_meta(self) -> dict:
        return {
            "adam_t": self.adam.t,
            "shuffle_rng": self.shuffle_rng.bit_generator.state,
            "dim": self.dim,
            "hidden_sizes": list(self.cfg.hidden_sizes),
        }

    def load_state(self, arrays: dict, meta: dict):
        if meta["dim"] != self.dim or tuple(meta["hidden_sizes"]) != tuple(self.cfg.hidden_sizes):
            raise ValueError("checkpoint network dimensions do not match this agent")
        for prefix, params in (("actor", self.actor), ("critic", self.critic)):
            for layer in range(len(params.weights)):
                params.weights[layer] = arrays[f"agent/{prefix}/w{layer}"].copy()
                params.biases[layer] = arrays[f"agent/{prefix}/b{layer}"].copy()
        self.log_std = arrays["agent/log_std"].copy()
        self.adam = AdamState(
            arrays["agent/adam/m"].copy(), arrays["agent/adam/v"].copy(), int(meta["adam_t"])
        )
        self.shuffle_rng.bit_generator.state = meta["shuffle_rng"]
