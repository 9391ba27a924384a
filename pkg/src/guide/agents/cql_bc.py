"""Conservative Q-learning on the TD3-BC chassis.

Same deterministic actor with cloning; the critics additionally pay
alpha_cql * (logsumexp over uniformly sampled actions - Q at the data action)
per state, which pushes value estimates for unseen actions down.  The target
action comes straight from the target actor (the published configuration
lists no smoothing noise for this variant).
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
    optimize_step,
    soft_update,
)
from . import td3_bc
from .common import (
    add_param_grads,
    bellman_target,
    build_actor,
    build_critic,
    q_forward,
    q_forward_tape,
)


@dataclass
class CQLBCAgent:
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


def create(feature_dim: int, hidden: tuple[int, ...], seed: int) -> CQLBCAgent:
    seeds = np.random.SeedSequence(seed).generate_state(4)
    actor = build_actor(feature_dim, hidden, int(seeds[0]))
    critic1 = build_critic(feature_dim, hidden, int(seeds[1]))
    critic2 = build_critic(feature_dim, hidden, int(seeds[2]))
    return CQLBCAgent(
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


def critic_targets(agent: CQLBCAgent, batch: dict, gamma: float) -> np.ndarray:
    a_next = forward(agent.actor_target, batch["next_features"])
    q_next = np.minimum(
        q_forward(agent.critic1_target, batch["next_features"], a_next),
        q_forward(agent.critic2_target, batch["next_features"], a_next))
    return bellman_target(batch["rewards"], batch["dones"], q_next, gamma)


def conservative_penalty_and_grads(critic: Network, features: np.ndarray,
                                   data_actions: np.ndarray,
                                   sampled_actions: np.ndarray,
                                   alpha_cql: float):
    """alpha_cql * mean_b[logsumexp_j Q(s_b, a_j) - Q(s_b, a_b)] with
    parameter gradients.

    ``sampled_actions`` is (B, N, 6); all B*N critic evaluations run as one
    batched forward pass.
    """
    n, n_samples, _ = sampled_actions.shape
    feature_dim = features.shape[1]
    rep = np.repeat(features, n_samples, axis=0)
    flat = sampled_actions.reshape(n * n_samples, -1)
    q_flat, tape_s = q_forward_tape(critic, rep, flat)
    q_samples = q_flat.reshape(n, n_samples)

    peak = q_samples.max(axis=1, keepdims=True)
    shifted = np.exp(q_samples - peak)
    lse = peak[:, 0] + np.log(shifted.sum(axis=1))
    softmax = shifted / shifted.sum(axis=1, keepdims=True)

    q_data, tape_d = q_forward_tape(critic, features, data_actions)
    penalty = float(alpha_cql * np.mean(lse - q_data))

    grads_s, _ = backward(critic, tape_s,
                          (alpha_cql * softmax / n).reshape(n * n_samples, 1))
    grads_d, _ = backward(critic, tape_d, np.full((n, 1), -alpha_cql / n))
    return penalty, add_param_grads(grads_s, grads_d), q_samples, q_data


def uniform_action_samples(rng: np.random.Generator, n: int,
                           n_samples: int) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, (n, n_samples, 6))


def critic_loss_and_grads(agent_or_critics, features, actions, targets,
                          sampled_actions, alpha_cql):
    """Twin MSE plus the conservative penalty on each critic."""
    if isinstance(agent_or_critics, CQLBCAgent):
        critic1, critic2 = agent_or_critics.critic1, agent_or_critics.critic2
    else:
        critic1, critic2 = agent_or_critics
    mse, grads1, grads2 = td3_bc.critic_loss_and_grads(
        critic1, critic2, features, actions, targets)
    pen1, pgrads1, _, _ = conservative_penalty_and_grads(
        critic1, features, actions, sampled_actions, alpha_cql)
    pen2, pgrads2, _, _ = conservative_penalty_and_grads(
        critic2, features, actions, sampled_actions, alpha_cql)
    loss = mse + pen1 + pen2
    return (loss, add_param_grads(grads1, pgrads1),
            add_param_grads(grads2, pgrads2), mse, pen1 + pen2)


def update(agent: CQLBCAgent, batch: dict, config) -> dict[str, float]:
    targets = critic_targets(agent, batch, config.gamma)
    sampled = uniform_action_samples(agent.rng, batch["features"].shape[0],
                                     config.cql_action_samples)
    loss, grads1, grads2, mse, penalty = critic_loss_and_grads(
        agent, batch["features"], batch["actions"], targets, sampled,
        config.alpha_cql)
    optimize_step(agent.critic1, grads1, agent.adam_critic1, config.critic_lr)
    optimize_step(agent.critic2, grads2, agent.adam_critic2, config.critic_lr)

    q_pi = q_forward(agent.critic1, batch["features"],
                     forward(agent.actor, batch["features"]))
    lam = td3_bc.bc_lambda(q_pi, config.alpha_bc)
    actor_loss, actor_grads, _ = td3_bc.actor_loss_and_grads(
        agent.actor, agent.critic1, batch["features"], batch["actions"], lam)
    optimize_step(agent.actor, actor_grads, agent.adam_actor, config.actor_lr)

    soft_update(agent.actor_target, agent.actor, config.tau)
    soft_update(agent.critic1_target, agent.critic1, config.tau)
    soft_update(agent.critic2_target, agent.critic2, config.tau)
    return {"critic_loss": loss, "critic_mse": mse,
            "cql_penalty": penalty, "actor_loss": actor_loss,
            "bc_lambda": lam}
