"""Soft actor-critic with a fixed entropy temperature.

The stochastic actor outputs (mean, log_std); actions are reparameterized
tanh-squashed Gaussian samples.  Actor gradients are derived by hand through
the reparameterization path with the noise draw held fixed, which is exactly
the quantity the finite-difference tests check.  Works both offline (frozen
buffer) and online (ring buffer fed by live episodes).
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
from .common import bellman_target, build_critic, build_gaussian_actor, \
    q_forward, q_forward_tape
from .policies import SQUASH_EPS, split_policy_output


@dataclass
class SACAgent:
    actor: Network
    critic1: Network
    critic2: Network
    critic1_target: Network
    critic2_target: Network
    adam_actor: AdamState
    adam_critic1: AdamState
    adam_critic2: AdamState
    rng: np.random.Generator
    feature_dim: int


def create(feature_dim: int, hidden: tuple[int, ...], seed: int) -> SACAgent:
    seeds = np.random.SeedSequence(seed).generate_state(4)
    actor = build_gaussian_actor(feature_dim, hidden, int(seeds[0]))
    critic1 = build_critic(feature_dim, hidden, int(seeds[1]))
    critic2 = build_critic(feature_dim, hidden, int(seeds[2]))
    return SACAgent(
        actor=actor,
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


def critic_targets(agent: SACAgent, batch: dict, xi_next: np.ndarray,
                   alpha: float, gamma: float) -> np.ndarray:
    """Entropy-adjusted bootstrap: min twin target Q at a fresh policy sample
    minus alpha * log-prob."""
    out = forward(agent.actor, batch["next_features"])
    policy = split_policy_output(out)
    a_next, logp_next, _ = policy.sample(xi_next)
    q_next = np.minimum(
        q_forward(agent.critic1_target, batch["next_features"], a_next),
        q_forward(agent.critic2_target, batch["next_features"], a_next))
    return bellman_target(batch["rewards"], batch["dones"],
                          q_next - alpha * logp_next, gamma)


def critic_loss_and_grads(critic1: Network, critic2: Network,
                          features: np.ndarray, actions: np.ndarray,
                          targets: np.ndarray):
    n = len(targets)
    q1, tape1 = q_forward_tape(critic1, features, actions)
    q2, tape2 = q_forward_tape(critic2, features, actions)
    res1 = q1 - targets
    res2 = q2 - targets
    loss = float(np.mean(res1 ** 2) + np.mean(res2 ** 2))
    grads1, _ = backward(critic1, tape1, (2.0 * res1 / n)[:, None])
    grads2, _ = backward(critic2, tape2, (2.0 * res2 / n)[:, None])
    return loss, grads1, grads2


def actor_loss_and_grads(actor: Network, critic1: Network, critic2: Network,
                         features: np.ndarray, xi: np.ndarray, alpha: float):
    """mean(alpha*log pi - min twin Q) at a = tanh(mean + std*xi), xi fixed.

    Returns the loss and actor parameter gradients.  Gradients flow through
    the squashed sample into whichever critic realizes the per-sample min,
    and through log pi's dependence on (mean, log_std).
    """
    n, feature_dim = features.shape
    out, tape = forward_tape(actor, features)
    policy = split_policy_output(out)
    action, logp, x = policy.sample(xi)
    q1, tape1 = q_forward_tape(critic1, features, action)
    q2, tape2 = q_forward_tape(critic2, features, action)
    q_min = np.minimum(q1, q2)
    loss = float(np.mean(alpha * logp - q_min))

    pick1 = (q1 <= q2).astype(np.float64)
    _, in_grad1 = backward(critic1, tape1, (-pick1 / n)[:, None])
    _, in_grad2 = backward(critic2, tape2, (-(1.0 - pick1) / n)[:, None])
    action_grad = in_grad1[:, feature_dim:] + in_grad2[:, feature_dim:]

    one_minus_a2 = 1.0 - action ** 2
    # d/dx of the squash correction -log(1 - tanh(x)^2 + eps)
    squash_grad = 2.0 * action * one_minus_a2 / (one_minus_a2 + SQUASH_EPS)
    x_grad = action_grad * one_minus_a2 + (alpha / n) * squash_grad
    mean_grad = x_grad
    log_std_grad = x_grad * (policy.std * xi) - alpha / n
    log_std_grad = log_std_grad * policy.clamp_mask
    out_grad = np.concatenate([mean_grad, log_std_grad], axis=1)
    grads, _ = backward(actor, tape, out_grad)
    return loss, grads, logp


def update(agent: SACAgent, batch: dict, config) -> dict[str, float]:
    n = batch["features"].shape[0]
    xi_next = agent.rng.normal(0.0, 1.0, (n, 6))
    targets = critic_targets(agent, batch, xi_next,
                             config.alpha_entropy, config.gamma)
    critic_loss, grads1, grads2 = critic_loss_and_grads(
        agent.critic1, agent.critic2, batch["features"], batch["actions"],
        targets)
    optimize_step(agent.critic1, grads1, agent.adam_critic1, config.critic_lr)
    optimize_step(agent.critic2, grads2, agent.adam_critic2, config.critic_lr)

    xi = agent.rng.normal(0.0, 1.0, (n, 6))
    actor_loss, actor_grads, logp = actor_loss_and_grads(
        agent.actor, agent.critic1, agent.critic2, batch["features"], xi,
        config.alpha_entropy)
    optimize_step(agent.actor, actor_grads, agent.adam_actor, config.actor_lr)

    soft_update(agent.critic1_target, agent.critic1, config.tau)
    soft_update(agent.critic2_target, agent.critic2, config.tau)
    return {"critic_loss": critic_loss, "actor_loss": actor_loss,
            "mean_logp": float(logp.mean())}
