"""Plain-numpy multi-layer perceptrons with explicit backpropagation.

Everything the agents need and nothing more: dense layers with tanh, relu
or identity activations, a gradient tape from the forward pass, reverse-mode
gradients for parameters and inputs, an adaptive-moment optimizer, Polyak
target averaging, and JSON checkpoints that round-trip bit for bit.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import StateWindow, WINDOW_TICKS

VALID_ACTIVATIONS = ("tanh", "relu", "identity")

CHECKPOINT_VERSION = 1


class ApproximatorError(ValueError):
    pass


class GradientError(RuntimeError):
    """Raised when an update would apply non-finite gradients."""


@dataclass
class Network:
    """Dense feed-forward net.  weights[i] has shape (sizes[i], sizes[i+1]);
    activations[i] applies after layer i's affine map."""

    sizes: tuple[int, ...]
    activations: tuple[str, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.sizes) < 2:
            raise ApproximatorError("a network needs at least input and output sizes")
        if len(self.activations) != len(self.sizes) - 1:
            raise ApproximatorError(
                f"{len(self.sizes) - 1} layers but {len(self.activations)} activations")
        for act in self.activations:
            if act not in VALID_ACTIVATIONS:
                raise ApproximatorError(f"unknown activation {act!r}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expect = (self.sizes[i], self.sizes[i + 1])
            if w.shape != expect or b.shape != (self.sizes[i + 1],):
                raise ApproximatorError(
                    f"layer {i}: weight {w.shape} / bias {b.shape} do not match "
                    f"sizes {expect}")

    @property
    def n_layers(self) -> int:
        return len(self.weights)


def init_network(sizes, activations, seed) -> Network:
    """Uniform fan-in initialization: each layer's entries are drawn from
    U(-1/sqrt(n_in), 1/sqrt(n_in)).  Deterministic per seed."""
    sizes = tuple(int(s) for s in sizes)
    activations = tuple(activations)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(n_in)
        weights.append(rng.uniform(-bound, bound, size=(n_in, n_out)))
        biases.append(rng.uniform(-bound, bound, size=n_out))
    return Network(sizes, activations, weights, biases)


def clone_network(net: Network) -> Network:
    return Network(net.sizes, net.activations,
                   [w.copy() for w in net.weights],
                   [b.copy() for b in net.biases])


def _apply_activation(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _activation_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (z > 0.0).astype(z.dtype)
    return np.ones_like(z)


@dataclass
class GradientTape:
    """Cache of one forward pass: the input and every layer's pre-activation
    and activation, all with a leading batch axis."""

    x: np.ndarray
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)
    single: bool = False


def _as_batch(net: Network, x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != net.sizes[0]:
        raise ApproximatorError(
            f"input shape {np.asarray(x).shape} does not match input size "
            f"{net.sizes[0]}")
    return arr, single


def forward(net: Network, x) -> np.ndarray:
    """Run the net on a single vector or a (batch, n_in) matrix."""
    arr, single = _as_batch(net, x)
    for w, b, act in zip(net.weights, net.biases, net.activations):
        arr = _apply_activation(act, arr @ w + b)
    return arr[0] if single else arr


def forward_tape(net: Network, x) -> tuple[np.ndarray, GradientTape]:
    """Forward pass that records everything backward() needs."""
    arr, single = _as_batch(net, x)
    tape = GradientTape(x=arr, single=single)
    for w, b, act in zip(net.weights, net.biases, net.activations):
        z = arr @ w + b
        arr = _apply_activation(act, z)
        tape.pre.append(z)
        tape.post.append(arr)
    return (arr[0] if single else arr), tape


def backward(net: Network, tape: GradientTape, output_grad):
    """Reverse-mode gradients.

    output_grad is dLoss/dOutput with the same shape the forward pass
    returned.  Returns (param_grads, input_grad) where param_grads is a list
    of (dW, db) per layer summed over the batch, and input_grad has the
    input's shape.  Callers fold any 1/batch factor into output_grad.
    """
    g = np.asarray(output_grad, dtype=np.float64)
    if tape.single:
        g = g[None, :]
    if g.shape != tape.post[-1].shape:
        raise ApproximatorError(
            f"output_grad shape {np.asarray(output_grad).shape} does not match "
            f"forward output {tape.post[-1].shape}")
    param_grads: list[tuple[np.ndarray, np.ndarray]] = [None] * net.n_layers
    delta = g
    for i in range(net.n_layers - 1, -1, -1):
        delta = delta * _activation_grad(net.activations[i], tape.pre[i], tape.post[i])
        inputs = tape.x if i == 0 else tape.post[i - 1]
        param_grads[i] = (inputs.T @ delta, delta.sum(axis=0))
        delta = delta @ net.weights[i].T
    input_grad = delta[0] if tape.single else delta
    return param_grads, input_grad


@dataclass
class AdamState:
    t: int
    m: list[tuple[np.ndarray, np.ndarray]]
    v: list[tuple[np.ndarray, np.ndarray]]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(net: Network, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    zeros = lambda: [(np.zeros_like(w), np.zeros_like(b))
                     for w, b in zip(net.weights, net.biases)]
    return AdamState(t=0, m=zeros(), v=zeros(), beta1=beta1, beta2=beta2, eps=eps)


def optimize_step(net: Network, param_grads, state: AdamState, lr: float) -> None:
    """One bias-corrected adaptive-moment update, in place.

    Rejects the whole step (raising GradientError, leaving parameters and
    moments untouched) if any gradient entry is non-finite.
    """
    for i, (gw, gb) in enumerate(param_grads):
        if not (np.isfinite(gw).all() and np.isfinite(gb).all()):
            raise GradientError(f"non-finite gradient in layer {i}; step rejected")
    state.t += 1
    b1c = 1.0 - state.beta1 ** state.t
    b2c = 1.0 - state.beta2 ** state.t
    for i, (gw, gb) in enumerate(param_grads):
        for j, (g, p) in enumerate(((gw, net.weights[i]), (gb, net.biases[i]))):
            m, v = state.m[i][j], state.v[i][j]
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * g * g
            p -= lr * (m / b1c) / (np.sqrt(v / b2c) + state.eps)


def soft_update(target: Network, online: Network, tau: float) -> None:
    """target <- (1-tau)*target + tau*online, elementwise, in place."""
    if target.sizes != online.sizes or target.activations != online.activations:
        raise ApproximatorError("target and online architectures differ")
    for tw, ow in zip(target.weights, online.weights):
        tw *= 1.0 - tau
        tw += tau * ow
    for tb, ob in zip(target.biases, online.biases):
        tb *= 1.0 - tau
        tb += tau * ob


def network_to_dict(net: Network) -> dict:
    """Versioned checkpoint: layer spec plus one flat parameter list in
    layer order (weights row-major, then bias, per layer)."""
    flat = []
    for w, b in zip(net.weights, net.biases):
        flat.extend(w.ravel().tolist())
        flat.extend(b.tolist())
    return {
        "version": CHECKPOINT_VERSION,
        "sizes": list(net.sizes),
        "activations": list(net.activations),
        "parameters": flat,
    }


def network_from_dict(d: dict) -> Network:
    if d.get("version") != CHECKPOINT_VERSION:
        raise ApproximatorError(f"unsupported checkpoint version {d.get('version')!r}")
    sizes = tuple(d["sizes"])
    activations = tuple(d["activations"])
    flat = np.asarray(d["parameters"], dtype=np.float64)
    weights, biases, k = [], [], 0
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        weights.append(flat[k:k + n_in * n_out].reshape(n_in, n_out).copy())
        k += n_in * n_out
        biases.append(flat[k:k + n_out].copy())
        k += n_out
    if k != flat.size:
        raise ApproximatorError(
            f"checkpoint holds {flat.size} parameters, architecture needs {k}")
    return Network(sizes, activations, weights, biases)


def save_network(net: Network, path) -> None:
    with open(path, "w") as fh:
        json.dump(network_to_dict(net), fh)
        fh.write("\n")


def load_network(path) -> Network:
    with open(path) as fh:
        return network_from_dict(json.load(fh))


def num_parameters(net: Network) -> int:
    return sum(w.size + b.size for w, b in zip(net.weights, net.biases))


# --- state featurization ----------------------------------------------------

FEATURES_PER_TICK = 8


def featurize_window(window: StateWindow, stride: int = 1) -> np.ndarray:
    """Flatten a state window for network input.

    Per tick: [sin(2*pi*h/24), cos(2*pi*h/24), sleep, glucose/400, carbs/100,
    bolus/20, minutes_since_meal/1440, minutes_since_inject/1440].  The fixed
    constants keep offline data and online rollouts on one scale.  With
    stride > 1 only every stride-th tick is kept, aligned so the most recent
    tick always survives.
    """
    idx = np.arange(WINDOW_TICKS - 1, -1, -stride)[::-1]
    angle = 2.0 * np.pi * window.hour_of_day[idx] / 24.0
    cols = np.stack([
        np.sin(angle),
        np.cos(angle),
        window.sleep[idx],
        window.glucose[idx] / 400.0,
        window.carbs[idx] / 100.0,
        window.bolus[idx] / 20.0,
        window.minutes_since_meal[idx] / 1440.0,
        window.minutes_since_inject[idx] / 1440.0,
    ], axis=1)
    return cols.ravel()


def featurize_windows(windows: np.ndarray, stride: int = 1) -> np.ndarray:
    """Batch form of featurize_window over stacked (B, 72, 7) channel arrays
    in StateWindow.to_array() order.  Training loops featurize whole buffers
    through here instead of going window by window.
    """
    w = np.asarray(windows, dtype=np.float64)
    if w.ndim != 3 or w.shape[1:] != (WINDOW_TICKS, 7):
        raise ApproximatorError(
            f"expected (B, {WINDOW_TICKS}, 7) windows, got {w.shape}")
    idx = np.arange(WINDOW_TICKS - 1, -1, -stride)[::-1]
    w = w[:, idx, :]
    angle = 2.0 * np.pi * w[:, :, 0] / 24.0
    cols = np.stack([
        np.sin(angle),
        np.cos(angle),
        w[:, :, 1],
        w[:, :, 2] / 400.0,
        w[:, :, 3] / 100.0,
        w[:, :, 4] / 20.0,
        w[:, :, 5] / 1440.0,
        w[:, :, 6] / 1440.0,
    ], axis=2)
    return cols.reshape(w.shape[0], -1)


def feature_size(stride: int = 1) -> int:
    return len(range(WINDOW_TICKS - 1, -1, -stride)) * FEATURES_PER_TICK
