"""Pieces every algorithm shares: the one-step bootstrap target, network
builders, and critic forward helpers for state-action inputs."""
from __future__ import annotations

import numpy as np

from ..approximator import Network, forward, forward_tape, init_network
from ..core import ACTION_DIM


class AgentError(RuntimeError):
    pass


def bellman_target(r, done, next_q, gamma: float):
    """One-step bootstrapped return: r + gamma * (1 - done) * next_q.

    Vectorized over matching shapes; done=1 masks the bootstrap term.
    """
    if not (0.0 < gamma <= 1.0):
        raise AgentError(f"gamma={gamma} outside (0, 1]")
    r = np.asarray(r, dtype=np.float64)
    done = np.asarray(done, dtype=np.float64)
    next_q = np.asarray(next_q, dtype=np.float64)
    for name, arr in (("r", r), ("done", done), ("next_q", next_q)):
        if not np.isfinite(arr).all():
            raise AgentError(f"non-finite {name} in bellman target")
    out = r + gamma * (1.0 - done) * next_q
    return float(out) if out.ndim == 0 else out


def build_actor(feature_dim: int, hidden: tuple[int, ...], seed: int) -> Network:
    """Deterministic actor: features -> tanh action in [-1, 1]^6."""
    sizes = [feature_dim, *hidden, ACTION_DIM]
    return init_network(sizes, ("relu",) * len(hidden) + ("tanh",), seed)


def build_gaussian_actor(feature_dim: int, hidden: tuple[int, ...],
                         seed: int) -> Network:
    """Stochastic actor head: features -> (mean[6], raw log_std[6])."""
    sizes = [feature_dim, *hidden, 2 * ACTION_DIM]
    return init_network(sizes, ("relu",) * len(hidden) + ("identity",), seed)


def build_critic(feature_dim: int, hidden: tuple[int, ...], seed: int) -> Network:
    """Q network over concatenated (features, action)."""
    sizes = [feature_dim + ACTION_DIM, *hidden, 1]
    return init_network(sizes, ("relu",) * len(hidden) + ("identity",), seed)


def build_value(feature_dim: int, hidden: tuple[int, ...], seed: int) -> Network:
    sizes = [feature_dim, *hidden, 1]
    return init_network(sizes, ("relu",) * len(hidden) + ("identity",), seed)


def q_forward(net: Network, features: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Critic value for a batch, returned as a flat (B,) vector."""
    return forward(net, np.concatenate([features, actions], axis=1))[:, 0]


def q_forward_tape(net: Network, features: np.ndarray, actions: np.ndarray):
    out, tape = forward_tape(net, np.concatenate([features, actions], axis=1))
    return out[:, 0], tape


def add_param_grads(a, b):
    """Elementwise sum of two per-layer (dW, db) gradient lists."""
    return [(dw_a + dw_b, db_a + db_b)
            for (dw_a, db_a), (dw_b, db_b) in zip(a, b)]
