"""Twin-delayed deterministic actor-critic with a behavior-cloning term.

The actor maximizes Q while staying close to the data actions; the cloning
weight is normalized by the batch's mean |Q| so the two terms keep a stable
ratio as critic magnitudes drift.  Loss/gradient computation is split from
the optimizer steps so gradients can be checked against finite differences.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..approximator import (
    AdamState,
    Network,
    adam_init,
    backward,
    clone_network,
    forward,
    forward_tape,
    optimize_step,
    soft_update,
)
from .common import (
    bellman_target,
    build_actor,
    build_critic,
    q_forward,
    q_forward_tape,
)

LAMBDA_FLOOR = 1e-8


@dataclass
class TD3BCAgent:
    actor: Network
    actor_target: Network
    critic1: Network
    critic2: Network
    critic1_target: Network
    critic2_target: Network
    adam_actor: AdamState
    adam_critic1: AdamState
    adam_critic2: AdamState
    rng: np.random.Generator
    feature_dim: int


def create(feature_dim: int, hidden: tuple[int, ...], seed: int) -> TD3BCAgent:
    seeds = np.random.SeedSequence(seed).generate_state(4)
    actor = build_actor(feature_dim, hidden, int(seeds[0]))
    critic1 = build_critic(feature_dim, hidden, int(seeds[1]))
    critic2 = build_critic(feature_dim, hidden, int(seeds[2]))
    return TD3BCAgent(
        actor=actor,
        actor_target=clone_network(actor),
        critic1=critic1,
        critic2=critic2,
        critic1_target=clone_network(critic1),
        critic2_target=clone_network(critic2),
        adam_actor=adam_init(actor),
        adam_critic1=adam_init(critic1),
        adam_critic2=adam_init(critic2),
        rng=np.random.default_rng(int(seeds[3])),
        feature_dim=feature_dim,
    )


def smoothed_target_actions(actor_target: Network, next_features: np.ndarray,
                            noise: np.ndarray) -> np.ndarray:
    """Target-policy action with pre-clipped smoothing noise, clipped to the
    action box."""
    return np.clip(forward(actor_target, next_features) + noise, -1.0, 1.0)


def critic_targets(agent: TD3BCAgent, batch: dict, noise: np.ndarray,
                   gamma: float) -> np.ndarray:
    a_next = smoothed_target_actions(agent.actor_target,
                                     batch["next_features"], noise)
    q_next = np.minimum(
        q_forward(agent.critic1_target, batch["next_features"], a_next),
        q_forward(agent.critic2_target, batch["next_features"], a_next))
    return bellman_target(batch["rewards"], batch["dones"], q_next, gamma)


def critic_loss_and_grads(critic1: Network, critic2: Network,
                          features: np.ndarray, actions: np.ndarray,
                          targets: np.ndarray):
    """Summed twin MSE against fixed targets, plus per-critic param grads."""
    n = len(targets)
    q1, tape1 = q_forward_tape(critic1, features, actions)
    q2, tape2 = q_forward_tape(critic2, features, actions)
    res1 = q1 - targets
    res2 = q2 - targets
    loss = float(np.mean(res1 ** 2) + np.mean(res2 ** 2))
    grads1, _ = backward(critic1, tape1, (2.0 * res1 / n)[:, None])
    grads2, _ = backward(critic2, tape2, (2.0 * res2 / n)[:, None])
    return loss, grads1, grads2


def bc_lambda(q_values: np.ndarray, alpha_bc: float) -> float:
    """Cloning-normalized Q weight: alpha / mean |Q|, treated as a constant
    (no gradient) during the actor step."""
    return float(alpha_bc / (np.abs(q_values).mean() + LAMBDA_FLOOR))


def actor_loss_and_grads(actor: Network, critic1: Network,
                         features: np.ndarray, data_actions: np.ndarray,
                         lam: float):
    """TD3-BC actor objective -lam*mean Q(s, pi(s)) + mean ||pi(s) - a||^2
    for a fixed lambda, with gradients through actor parameters only."""
    n = features.shape[0]
    feature_dim = features.shape[1]
    a_pi, tape = forward_tape(actor, features)
    q, q_tape = q_forward_tape(critic1, features, a_pi)
    diff = a_pi - data_actions
    loss = float(-lam * q.mean() + (diff ** 2).sum(axis=1).mean())
    _, input_grad = backward(critic1, q_tape,
                             np.full((n, 1), -lam / n))
    action_grad = input_grad[:, feature_dim:] + 2.0 * diff / n
    grads, _ = backward(actor, tape, action_grad)
    return loss, grads, q


def update(agent: TD3BCAgent, batch: dict, config) -> dict[str, float]:
    """One gradient step on both critics and the actor, then target tracking."""
    n = batch["features"].shape[0]
    noise = np.clip(agent.rng.normal(0.0, config.policy_noise, (n, 6)),
                    -config.noise_clip, config.noise_clip)
    targets = critic_targets(agent, batch, noise, config.gamma)
    critic_loss, grads1, grads2 = critic_loss_and_grads(
        agent.critic1, agent.critic2, batch["features"], batch["actions"],
        targets)
    optimize_step(agent.critic1, grads1, agent.adam_critic1, config.critic_lr)
    optimize_step(agent.critic2, grads2, agent.adam_critic2, config.critic_lr)

    q_pi = q_forward(agent.critic1, batch["features"],
                     forward(agent.actor, batch["features"]))
    lam = bc_lambda(q_pi, config.alpha_bc)
    actor_loss, actor_grads, _ = actor_loss_and_grads(
        agent.actor, agent.critic1, batch["features"], batch["actions"], lam)
    optimize_step(agent.actor, actor_grads, agent.adam_actor, config.actor_lr)

    soft_update(agent.actor_target, agent.actor, config.tau)
    soft_update(agent.critic1_target, agent.critic1, config.tau)
    soft_update(agent.critic2_target, agent.critic2, config.tau)
    return {"critic_loss": critic_loss, "actor_loss": actor_loss,
            "bc_lambda": lam}
