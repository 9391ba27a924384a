"""Training loops, configuration, evaluation snapshots, and persistence.

Offline algorithms take a frozen buffer and never touch an environment;
online algorithms alternate collection and optimization for a fixed number
of epochs.  Every loop shares the divergence guard (any non-finite loss
aborts, dumping a recovery checkpoint when an output directory is given) and
the learning-curve format (one row per evaluation snapshot).
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ..approximator import (
    GradientError,
    featurize_windows,
    feature_size,
    forward,
    load_network,
    save_network,
)
from ..env import GlucoseEnv, rollout
from ..metrics import glycemic_summary
from . import cql_bc, ppo, sac, td3_bc
from .buffer import ReplayBuffer
from .common import AgentError
from .policies import NetworkPolicy, env_policy, split_policy_output

ALGORITHMS = ("td3bc", "cqlbc", "sac_offline", "sac_online", "ppo")
OFFLINE_ALGORITHMS = ("td3bc", "cqlbc", "sac_offline")


class TrainingDivergedError(RuntimeError):
    """A loss went non-finite; training stopped and state was checkpointed."""


@dataclass(frozen=True)
class AgentConfig:
    """Hyperparameters for one training run.

    Defaults follow the published configuration for each algorithm; use
    ``default_config(algorithm)`` to get the right per-algorithm values
    instead of instantiating directly.
    """

    algorithm: str
    gamma: float = 0.98
    tau: float = 0.005
    actor_lr: float = 3e-4
    critic_lr: float = 1e-4
    batch_size: int = 256
    update_steps: int = 10_000      # offline gradient steps
    epochs: int = 20                # online collection epochs
    alpha_bc: float = 1.5
    alpha_cql: float = 0.05
    policy_noise: float = 0.2
    noise_clip: float = 0.5
    alpha_entropy: float = 0.2
    clip_ratio: float = 0.2
    gae_lambda: float = 0.95
    entropy_coeff: float = 0.001
    value_coeff: float = 0.5
    ppo_inner_epochs: int = 4
    cql_action_samples: int = 10
    hidden_sizes: tuple[int, ...] = (256, 256)
    feature_stride: int = 1
    eval_every: int = 1000          # offline snapshot cadence, in update steps
    online_buffer_capacity: int = 50_000

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise AgentError(
                f"unknown algorithm {self.algorithm!r}; pick from {ALGORITHMS}")
        if not (0.0 < self.gamma <= 1.0):
            raise AgentError(f"gamma={self.gamma} outside (0, 1]")
        if not (0.0 < self.tau <= 1.0):
            raise AgentError(f"tau={self.tau} outside (0, 1]")
        object.__setattr__(self, "hidden_sizes", tuple(self.hidden_sizes))


def default_config(algorithm: str, **overrides) -> AgentConfig:
    """Published per-algorithm hyperparameters, overridable by keyword."""
    base: dict = {"algorithm": algorithm}
    if algorithm == "td3bc":
        base.update(gamma=0.98, tau=0.005, alpha_bc=1.5, policy_noise=0.2,
                    noise_clip=0.5, actor_lr=3e-4, critic_lr=1e-4)
    elif algorithm == "cqlbc":
        base.update(gamma=0.98, tau=0.005, alpha_cql=0.05, alpha_bc=2.5,
                    actor_lr=3e-4, critic_lr=1e-4)
    elif algorithm in ("sac_offline", "sac_online"):
        base.update(gamma=0.98, tau=0.005, alpha_entropy=0.2,
                    actor_lr=3e-4, critic_lr=1e-4)
    elif algorithm == "ppo":
        base.update(gamma=0.99, actor_lr=3e-4, critic_lr=3e-4,
                    gae_lambda=0.95, clip_ratio=0.2, entropy_coeff=0.001,
                    value_coeff=0.5)
    else:
        raise AgentError(f"unknown algorithm {algorithm!r}")
    base.update(overrides)
    return AgentConfig(**base)


@dataclass
class TrainResult:
    config: AgentConfig
    policy: NetworkPolicy
    agent: object
    curves: list[dict] = field(default_factory=list)

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_policy(out / "policy", self.config, self.agent)
        write_curves(out / "curves.csv", self.curves)
        with open(out / "config.json", "w") as fh:
            json.dump(asdict(self.config), fh, indent=2)


# -- policy persistence --------------------------------------------------------

_AGENT_NETS = {
    "td3bc": ("actor", "actor_target", "critic1", "critic2",
              "critic1_target", "critic2_target"),
    "cqlbc": ("actor", "actor_target", "critic1", "critic2",
              "critic1_target", "critic2_target"),
    "sac_offline": ("actor", "critic1", "critic2",
                    "critic1_target", "critic2_target"),
    "sac_online": ("actor", "critic1", "critic2",
                   "critic1_target", "critic2_target"),
    "ppo": ("actor", "value_net"),
}

_STOCHASTIC_HEAD = {"sac_offline", "sac_online", "ppo"}


def save_policy(policy_dir, config: AgentConfig, agent) -> None:
    out = Path(policy_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "algorithm": config.algorithm,
        "feature_stride": config.feature_stride,
        "hidden_sizes": list(config.hidden_sizes),
        "networks": list(_AGENT_NETS[config.algorithm]),
    }
    with open(out / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2)
    for name in _AGENT_NETS[config.algorithm]:
        save_network(getattr(agent, name), out / f"{name}.json")


def load_policy(policy_dir) -> NetworkPolicy:
    """Rebuild the deterministic evaluation policy from a saved directory."""
    policy_dir = Path(policy_dir)
    with open(policy_dir / "meta.json") as fh:
        meta = json.load(fh)
    actor = load_network(policy_dir / "actor.json")
    return NetworkPolicy(actor, stride=meta["feature_stride"],
                         stochastic_head=meta["algorithm"] in _STOCHASTIC_HEAD)


def write_curves(path, rows: list[dict]) -> None:
    fields: list[str] = []
    for row in rows:
        for key in row:
            if key not in fields:
                fields.append(key)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


# -- evaluation ----------------------------------------------------------------

def evaluate_policy(env: GlucoseEnv, initial_states, policy,
                    seeds) -> dict[str, float]:
    """Mean episode return and glycemic time-in-range over evaluation
    episodes; every (initial state, seed) pair is one episode."""
    returns, tirs = [], []
    act = env_policy(policy)
    for initial in initial_states:
        for seed in seeds:
            results = rollout(env, initial, int(seed), act)
            returns.append(sum(r.reward_scaled for r in results))
            glucose = np.concatenate([r.forecast.values for r in results])
            tirs.append(glycemic_summary(glucose).tir_pct)
    return {"eval_return": float(np.mean(returns)),
            "eval_tir": float(np.mean(tirs))}


# -- training loops ------------------------------------------------------------

def _policy_for(config: AgentConfig, agent) -> NetworkPolicy:
    return NetworkPolicy(agent.actor, stride=config.feature_stride,
                         stochastic_head=config.algorithm in _STOCHASTIC_HEAD)


def _guard(losses: dict, config: AgentConfig, agent, step, out_dir):
    bad = [k for k, v in losses.items() if not np.isfinite(v)]
    if bad:
        if out_dir is not None:
            save_policy(Path(out_dir) / "diverged_checkpoint", config, agent)
        raise TrainingDivergedError(
            f"non-finite {', '.join(bad)} at step {step}")


def _featurized_buffer(buffer: ReplayBuffer, stride: int):
    """Featurize the whole buffer once; training then samples row indices."""
    n = buffer.size
    return {
        "features": featurize_windows(buffer.states[:n], stride),
        "actions": buffer.actions[:n].copy(),
        "rewards": buffer.rewards[:n].copy(),
        "next_features": featurize_windows(buffer.next_states[:n], stride),
        "dones": buffer.dones[:n].astype(np.float64),
    }


_OFFLINE_UPDATES = {"td3bc": td3_bc.update, "cqlbc": cql_bc.update,
                    "sac_offline": sac.update}
_CREATORS = {"td3bc": td3_bc.create, "cqlbc": cql_bc.create,
             "sac_offline": sac.create, "sac_online": sac.create}


def _train_offline(config, buffer, seed, eval_env, eval_initial_states,
                   eval_seeds, out_dir):
    if buffer is None:
        raise AgentError(f"{config.algorithm} is offline and needs a buffer")
    if not buffer.frozen:
        raise AgentError("offline training requires a frozen buffer")
    dim = feature_size(config.feature_stride)
    agent = _CREATORS[config.algorithm](dim, config.hidden_sizes, seed)
    update_fn = _OFFLINE_UPDATES[config.algorithm]
    data = _featurized_buffer(buffer, config.feature_stride)
    n = len(data["rewards"])
    sampler = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    curves = []
    pending: dict[str, list] = {}
    for step in range(1, config.update_steps + 1):
        idx = sampler.integers(0, n, size=config.batch_size)
        batch = {k: v[idx] for k, v in data.items()}
        try:
            losses = update_fn(agent, batch, config)
        except GradientError as exc:
            if out_dir is not None:
                save_policy(Path(out_dir) / "diverged_checkpoint", config, agent)
            raise TrainingDivergedError(str(exc)) from exc
        _guard(losses, config, agent, step, out_dir)
        for key, val in losses.items():
            pending.setdefault(key, []).append(val)
        if step % config.eval_every == 0 or step == config.update_steps:
            row = {"step": step}
            row.update({k: float(np.mean(v)) for k, v in pending.items()})
            pending = {}
            if eval_env is not None:
                row.update(evaluate_policy(eval_env, eval_initial_states,
                                           _policy_for(config, agent),
                                           eval_seeds))
            curves.append(row)
    return agent, curves


def _train_sac_online(config, env, initial_states, seed, eval_env,
                      eval_initial_states, eval_seeds, out_dir):
    if env is None or not initial_states:
        raise AgentError("online training needs an env and initial states")
    dim = feature_size(config.feature_stride)
    agent = sac.create(dim, config.hidden_sizes, seed)
    buffer = ReplayBuffer(config.online_buffer_capacity, seed=seed)
    curves = []
    step = 0
    for epoch in range(config.epochs):
        pending: dict[str, list] = {}
        for episode, initial in enumerate(initial_states):
            episode_seed = int(np.random.SeedSequence(
                [seed, epoch, episode]).generate_state(1)[0])
            state = env.reset(initial, episode_seed)
            collected = 0
            while not state.done:
                f = featurize_windows(state.window.to_array()[None, :, :],
                                      config.feature_stride)
                policy_out = split_policy_output(forward(agent.actor, f))
                xi = agent.rng.normal(0.0, 1.0, (1, 6))
                action, _, _ = policy_out.sample(xi)
                result = env.step(state, action[0])
                buffer.add(state.window.to_array(), action[0],
                           result.reward_scaled,
                           result.next_state.window.to_array(), result.done)
                state = result.next_state
                collected += 1
            for _ in range(collected):
                if buffer.size < config.batch_size:
                    break
                raw = buffer.sample(config.batch_size)
                batch = {
                    "features": featurize_windows(raw["states"],
                                                  config.feature_stride),
                    "actions": raw["actions"],
                    "rewards": raw["rewards"],
                    "next_features": featurize_windows(raw["next_states"],
                                                       config.feature_stride),
                    "dones": raw["dones"],
                }
                step += 1
                try:
                    losses = sac.update(agent, batch, config)
                except GradientError as exc:
                    if out_dir is not None:
                        save_policy(Path(out_dir) / "diverged_checkpoint",
                                    config, agent)
                    raise TrainingDivergedError(str(exc)) from exc
                _guard(losses, config, agent, step, out_dir)
                for key, val in losses.items():
                    pending.setdefault(key, []).append(val)
        row = {"step": step, "epoch": epoch}
        row.update({k: float(np.mean(v)) for k, v in pending.items() if v})
        if eval_env is not None:
            row.update(evaluate_policy(eval_env, eval_initial_states,
                                       _policy_for(config, agent), eval_seeds))
        curves.append(row)
    return agent, curves


def _train_ppo(config, env, initial_states, seed, eval_env,
               eval_initial_states, eval_seeds, out_dir):
    if env is None or not initial_states:
        raise AgentError("online training needs an env and initial states")
    dim = feature_size(config.feature_stride)
    agent = ppo.create(dim, config.hidden_sizes, seed)
    curves = []
    for epoch in range(config.epochs):
        jobs = [(initial,
                 int(np.random.SeedSequence([seed, epoch, k]).generate_state(1)[0]))
                for k, initial in enumerate(initial_states)]
        batch = ppo.collect_trajectories(env, jobs, agent,
                                         config.feature_stride,
                                         config.gamma, config.gae_lambda)
        try:
            policy_loss, value_loss = ppo.ppo_update(batch, agent, config)
        except GradientError as exc:
            if out_dir is not None:
                save_policy(Path(out_dir) / "diverged_checkpoint", config, agent)
            raise TrainingDivergedError(str(exc)) from exc
        losses = {"policy_loss": policy_loss, "value_loss": value_loss}
        _guard(losses, config, agent, epoch, out_dir)
        row = {"step": (epoch + 1) * len(batch["logp_old"]), "epoch": epoch}
        row.update(losses)
        if eval_env is not None:
            row.update(evaluate_policy(eval_env, eval_initial_states,
                                       _policy_for(config, agent), eval_seeds))
        curves.append(row)
    return agent, curves


def train(config: AgentConfig, *, buffer: ReplayBuffer | None = None,
          env: GlucoseEnv | None = None, initial_states=None, seed: int,
          eval_env: GlucoseEnv | None = None, eval_initial_states=None,
          eval_seeds=(0,), out_dir=None) -> TrainResult:
    """Train one agent and return its evaluation policy plus learning curves.

    Offline algorithms (``td3bc``, ``cqlbc``, ``sac_offline``) consume the
    frozen ``buffer`` and perform ``update_steps`` gradient steps with no
    environment interaction.  Online algorithms (``sac_online``, ``ppo``)
    interact with ``env`` starting from ``initial_states`` for ``epochs``
    rounds.  Passing ``eval_env``/``eval_initial_states`` adds an evaluation
    snapshot to every learning-curve row.
    """
    if config.algorithm in OFFLINE_ALGORITHMS:
        agent, curves = _train_offline(config, buffer, seed, eval_env,
                                       eval_initial_states, eval_seeds, out_dir)
    elif config.algorithm == "sac_online":
        agent, curves = _train_sac_online(config, env, initial_states, seed,
                                          eval_env, eval_initial_states,
                                          eval_seeds, out_dir)
    elif config.algorithm == "ppo":
        agent, curves = _train_ppo(config, env, initial_states, seed,
                                   eval_env, eval_initial_states, eval_seeds,
                                   out_dir)
    else:
        raise AgentError(f"unknown algorithm {config.algorithm!r}")
    result = TrainResult(config=config, policy=_policy_for(config, agent),
                         agent=agent, curves=curves)
    if out_dir is not None:
        result.save(out_dir)
    return result
