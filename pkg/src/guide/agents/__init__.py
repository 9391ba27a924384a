"""Policy optimization: replay buffers, baseline and network policies, four
actor-critic algorithms, and the training loops that tie them together."""

from .buffer import BufferError, ReplayBuffer, build_offline_buffer
from .common import AgentError, bellman_target
from .policies import (
    HeuristicPolicy,
    NetworkPolicy,
    RandomPolicy,
    StochasticPolicyOutput,
    env_policy,
)
from .training import (
    ALGORITHMS,
    AgentConfig,
    TrainingDivergedError,
    TrainResult,
    default_config,
    train,
)

__all__ = [
    "ALGORITHMS",
    "AgentConfig",
    "AgentError",
    "BufferError",
    "HeuristicPolicy",
    "NetworkPolicy",
    "RandomPolicy",
    "ReplayBuffer",
    "StochasticPolicyOutput",
    "TrainResult",
    "TrainingDivergedError",
    "bellman_target",
    "build_offline_buffer",
    "default_config",
    "env_policy",
    "train",
]
