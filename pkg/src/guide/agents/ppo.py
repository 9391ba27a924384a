"""Proximal policy optimization on full-day trajectories.

Actions are sampled from the same tanh-squashed Gaussian head as soft
actor-critic; because the squash correction depends only on the stored
pre-squash point, it cancels in the importance ratio, so the clip operates on
the underlying Gaussian ratio.  Advantages come from generalized advantage
estimation computed per episode, normalized across the collected batch.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..approximator import (
    AdamState,
    Network,
    adam_init,
    backward,
    forward,
    forward_tape,
    optimize_step,
)
from ..approximator import featurize_window
from ..env import GlucoseEnv, rollout  # noqa: F401  (rollout re-exported for callers)
from .common import AgentError, build_gaussian_actor, build_value
from .policies import split_policy_output


@dataclass
class PPOAgent:
    actor: Network
    value_net: Network
    adam_actor: AdamState
    adam_value: AdamState
    rng: np.random.Generator
    feature_dim: int


def create(feature_dim: int, hidden: tuple[int, ...], seed: int) -> PPOAgent:
    seeds = np.random.SeedSequence(seed).generate_state(3)
    actor = build_gaussian_actor(feature_dim, hidden, int(seeds[0]))
    value_net = build_value(feature_dim, hidden, int(seeds[1]))
    return PPOAgent(
        actor=actor,
        value_net=value_net,
        adam_actor=adam_init(actor),
        adam_value=adam_init(value_net),
        rng=np.random.default_rng(int(seeds[2])),
        feature_dim=feature_dim,
    )


def gae(rewards, values, dones, last_value: float, gamma: float,
        lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates and value targets for one episode.

    With gamma = lam = 1 and a zero terminal value this reduces exactly to
    the Monte-Carlo return minus the value baseline.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    t_len = len(rewards)
    advantages = np.zeros(t_len)
    acc = 0.0
    for t in range(t_len - 1, -1, -1):
        next_value = last_value if t == t_len - 1 else values[t + 1]
        delta = rewards[t] + gamma * (1.0 - dones[t]) * next_value - values[t]
        acc = delta + gamma * lam * (1.0 - dones[t]) * acc
        advantages[t] = acc
    return advantages, advantages + values


def clipped_surrogate(logp_new: np.ndarray, logp_old: np.ndarray,
                      advantages: np.ndarray, eps: float):
    """Clipped-ratio policy loss and its gradient w.r.t. logp_new.

    The gradient flows only through samples where the unclipped branch is
    the active minimum; everywhere else the clip freezes the ratio.
    """
    with np.errstate(over="ignore"):
        ratio = np.exp(logp_new - logp_old)
    if not np.isfinite(ratio).all():
        raise AgentError("non-finite importance ratio (stale log-probs?)")
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * advantages
    per_sample = np.minimum(unclipped, clipped)
    loss = float(-per_sample.mean())
    n = len(ratio)
    active = (unclipped <= clipped).astype(np.float64)
    dloss_dlogp = -(active * ratio * advantages) / n
    return loss, dloss_dlogp


def collect_trajectories(env: GlucoseEnv, jobs, agent: PPOAgent,
                         stride: int, gamma: float,
                         lam: float) -> dict[str, np.ndarray]:
    """Roll one episode per (initial state, seed) job with sampled actions.

    Returns the flattened batch with per-episode GAE already applied; the
    advantage normalization happens later over the whole batch.
    """
    feats, x_pre, logp_old, advs, rets = [], [], [], [], []
    for initial, episode_seed in jobs:
        state = env.reset(initial, episode_seed)
        ep_feats, ep_x, ep_logp, ep_r, ep_v, ep_d = [], [], [], [], [], []
        while not state.done:
            f = featurize_window(state.window, stride)
            policy = split_policy_output(forward(agent.actor, f)[None, :])
            xi = agent.rng.normal(0.0, 1.0, (1, 6))
            action, logp, x = policy.sample(xi)
            value = float(forward(agent.value_net, f)[0])
            result = env.step(state, action[0])
            ep_feats.append(f)
            ep_x.append(x[0])
            ep_logp.append(float(logp[0]))
            ep_r.append(result.reward_scaled)
            ep_v.append(value)
            ep_d.append(float(result.done))
            state = result.next_state
        adv, ret = gae(ep_r, ep_v, ep_d, last_value=0.0, gamma=gamma, lam=lam)
        feats.extend(ep_feats)
        x_pre.extend(ep_x)
        logp_old.extend(ep_logp)
        advs.append(adv)
        rets.append(ret)
    return {
        "features": np.asarray(feats),
        "x_pre": np.asarray(x_pre),
        "logp_old": np.asarray(logp_old),
        "advantages": np.concatenate(advs),
        "returns": np.concatenate(rets),
    }


def actor_loss_and_grads(actor: Network, features: np.ndarray,
                         x_pre: np.ndarray, logp_old: np.ndarray,
                         advantages: np.ndarray, clip_ratio: float,
                         entropy_coeff: float):
    """Clipped-surrogate loss minus the entropy bonus, with actor gradients.

    The stored pre-squash points are held fixed, so the log-probability
    depends on the network only through (mean, log_std): d logp/d mean is
    z/std and d logp/d log_std is z^2 - 1 with z the standardized residual.
    The squash correction is a function of x alone and drops out.
    """
    m = features.shape[0]
    out, tape = forward_tape(actor, features)
    policy = split_policy_output(out)
    logp_new = policy.log_prob_presquash(x_pre)
    p_loss, dloss_dlogp = clipped_surrogate(logp_new, logp_old, advantages,
                                            clip_ratio)
    entropy = float(policy.entropy_gaussian().mean())
    loss = p_loss - entropy_coeff * entropy

    z = (x_pre - policy.mean) / policy.std
    mean_grad = dloss_dlogp[:, None] * (z / policy.std)
    log_std_grad = (dloss_dlogp[:, None] * (z ** 2 - 1.0)
                    - entropy_coeff / m)
    log_std_grad = log_std_grad * policy.clamp_mask
    out_grad = np.concatenate([mean_grad, log_std_grad], axis=1)
    grads, _ = backward(actor, tape, out_grad)
    return loss, grads, logp_new


def value_loss_and_grads(value_net: Network, features: np.ndarray,
                         returns: np.ndarray, value_coeff: float):
    """Coefficient-weighted squared error against the value targets."""
    m = features.shape[0]
    v, tape = forward_tape(value_net, features)
    res = v[:, 0] - returns
    loss = float(value_coeff * np.mean(res ** 2))
    grads, _ = backward(value_net, tape,
                        (value_coeff * 2.0 * res / m)[:, None])
    return loss, grads


def ppo_update(batch: dict, agent: PPOAgent, config) -> tuple[float, float]:
    """Run the inner optimization epochs over one collected batch.

    Returns the mean policy and value losses across all minibatch updates.
    """
    n = batch["features"].shape[0]
    adv = batch["advantages"]
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    policy_losses, value_losses = [], []
    for _ in range(config.ppo_inner_epochs):
        order = agent.rng.permutation(n)
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            p_loss, actor_grads, _ = actor_loss_and_grads(
                agent.actor, batch["features"][idx], batch["x_pre"][idx],
                batch["logp_old"][idx], adv[idx], config.clip_ratio,
                config.entropy_coeff)
            optimize_step(agent.actor, actor_grads, agent.adam_actor,
                          config.actor_lr)
            v_loss, v_grads = value_loss_and_grads(
                agent.value_net, batch["features"][idx],
                batch["returns"][idx], config.value_coeff)
            optimize_step(agent.value_net, v_grads, agent.adam_value,
                          config.critic_lr)
            policy_losses.append(p_loss)
            value_losses.append(v_loss)
    return float(np.mean(policy_losses)), float(np.mean(value_losses))
