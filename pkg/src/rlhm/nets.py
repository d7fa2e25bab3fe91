"""Dense tanh networks with hand-rolled reverse-mode gradients, plus Adam.

Everything is float64 numpy.  Parameters are kept structured for the
forward/backward passes and flattened into a single vector for the
optimizer and for checkpointing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class MlpParams:
    """Weights and biases of a [d_in, hidden..., d_out] net, tanh hidden layers."""

    weights: list
    biases: list

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def orthogonal(rows: int, cols: int, rng: np.random.Generator, gain: float = 1.0) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))  # fix the QR sign ambiguity
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def init_mlp(sizes, rng, out_gain: float = 1.0, input_scale: float = 1.0) -> MlpParams:
    """Orthogonal hidden layers; the first layer is divided by input_scale so
    raw states of that magnitude land in the responsive range of tanh."""
    weights, biases = [], []
    for layer, (d_in, d_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        gain = out_gain if layer == len(sizes) - 2 else 1.0
        w = orthogonal(d_out, d_in, rng, gain)
        if layer == 0 and input_scale > 0 and input_scale != 1.0:
            w = w / input_scale
        weights.append(w)
        biases.append(np.zeros(d_out))
    return MlpParams(weights, biases)


def mlp_forward(params: MlpParams, x: np.ndarray):
    """Forward pass. Accepts (d,) or (batch, d); returns (y, cache)."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x.reshape(1, -1) if squeeze else x
    if h.shape[1] != params.weights[0].shape[1]:
        raise ValueError(f"input width {h.shape[1]} != net input {params.weights[0].shape[1]}")
    activations = [h]
    n_layers = len(params.weights)
    for layer, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w.T + b
        if layer < n_layers - 1:
            h = np.tanh(h)
        activations.append(h)
    y = h[0] if squeeze else h
    return y, (activations, squeeze)


def mlp_backward(params: MlpParams, cache, grad_out: np.ndarray) -> MlpParams:
    """Gradients of sum(output * grad_out) w.r.t. every weight and bias."""
    activations, squeeze = cache
    g = np.asarray(grad_out, dtype=np.float64)
    if squeeze:
        g = g.reshape(1, -1)
    d_weights = [None] * len(params.weights)
    d_biases = [None] * len(params.biases)
    for layer in reversed(range(len(params.weights))):
        if layer < len(params.weights) - 1:
            g = g * (1.0 - activations[layer + 1] ** 2)  # tanh'
        d_weights[layer] = g.T @ activations[layer]
        d_biases[layer] = g.sum(axis=0)
        if layer > 0:
            g = g @ params.weights[layer]
    return MlpParams(d_weights, d_biases)


# ---------------------------------------------------------------------------
# Flattening
# ---------------------------------------------------------------------------

def pack_arrays(arrays) -> np.ndarray:
    return np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays])


def unpack_arrays(vec: np.ndarray, templates) -> list:
    out, offset = [], 0
    for t in templates:
        n = t.size
        out.append(vec[offset : offset + n].reshape(t.shape).copy())
        offset += n
    if offset != vec.size:
        raise ValueError(f"vector length {vec.size} does not match templates ({offset})")
    return out


def mlp_arrays(params: MlpParams) -> list:
    out = []
    for w, b in zip(params.weights, params.biases):
        out.extend([w, b])
    return out


def mlp_from_arrays(arrays) -> MlpParams:
    return MlpParams(list(arrays[0::2]), list(arrays[1::2]))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.t)


def adam_init(n: int) -> AdamState:
    return AdamState(np.zeros(n), np.zeros(n), 0)


def adam_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> np.ndarray:
    """One bias-corrected Adam update; mutates `state`, returns new params."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("parameter, gradient and moment shapes must agree")
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grads
    state.v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = state.m / (1.0 - beta1 ** state.t)
    v_hat = state.v / (1.0 - beta2 ** state.t)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps)


def clip_grad_norm(grads: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(grads))
    if norm > max_norm > 0:
        return grads * (max_norm / norm)
    return grads
