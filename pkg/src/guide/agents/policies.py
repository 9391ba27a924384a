"""Policies: the random baseline, the heuristic behavior controller used to
fill offline buffers, network-backed policies for trained agents, and the
tanh-squashed Gaussian machinery shared by the stochastic algorithms."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..approximator import Network, forward
from ..core import (
    ACTION_DIM,
    ActionType,
    BehavioralAction,
    StateWindow,
    encode_action,
)
from .common import AgentError

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
SQUASH_EPS = 1e-6
LOG_2PI = float(np.log(2.0 * np.pi))


class RandomPolicy:
    """Uniform raw actions in [-1, 1]^6; the paper's floor baseline."""

    def __init__(self, seed: int):
        self._rng = np.random.default_rng(seed)

    def act(self, window: StateWindow) -> np.ndarray:
        return self._rng.uniform(-1.0, 1.0, ACTION_DIM)


class HeuristicPolicy:
    """Rule-following behavior controller for offline data collection.

    Correction bolus of (g - 180)/30 U (pen-limited to 2..15) when glucose
    tops 180 with no injection inside two hours; 15-25 g of carbs under 80;
    otherwise nothing.  With probability ``epsilon`` it acts uniformly at
    random instead, and the magnitude entries of deliberate actions get
    Gaussian noise, so the buffer mixes good and bad behavior.
    """

    def __init__(self, seed: int, epsilon: float = 0.2,
                 magnitude_noise: float = 0.1):
        if not (0.0 <= epsilon <= 1.0):
            raise AgentError(f"epsilon={epsilon} outside [0, 1]")
        self.epsilon = epsilon
        self.magnitude_noise = magnitude_noise
        self._rng = np.random.default_rng(seed)

    def act(self, window: StateWindow) -> np.ndarray:
        rng = self._rng
        if rng.random() < self.epsilon:
            return rng.uniform(-1.0, 1.0, ACTION_DIM)
        g = float(window.glucose[-1])
        if g > 180.0 and float(window.minutes_since_inject[-1]) > 120.0:
            dose = float(np.clip((g - 180.0) / 30.0, 2.0, 15.0))
            intent = BehavioralAction(ActionType.INJECT, 20.0, dose, 0)
        elif g < 80.0:
            grams = float(rng.uniform(15.0, 25.0))
            intent = BehavioralAction(ActionType.EAT, grams, 5.0, 0)
        else:
            intent = BehavioralAction(ActionType.NOTHING, 20.0, 5.0, 0)
        raw = encode_action(intent)
        raw[3] += rng.normal(0.0, self.magnitude_noise)
        raw[4] += rng.normal(0.0, self.magnitude_noise)
        return np.clip(raw, -1.0, 1.0)


class NetworkPolicy:
    """Deterministic evaluation policy around a trained actor network.

    ``stochastic_head=True`` means the network emits (mean, log_std) and the
    policy acts on tanh(mean); otherwise the network output already is the
    squashed action.
    """

    def __init__(self, net: Network, stride: int = 1,
                 stochastic_head: bool = False):
        self.net = net
        self.stride = stride
        self.stochastic_head = stochastic_head

    def act(self, window: StateWindow) -> np.ndarray:
        from ..approximator import featurize_window

        out = forward(self.net, featurize_window(window, self.stride))
        if self.stochastic_head:
            return np.tanh(out[:ACTION_DIM])
        return out


def env_policy(policy):
    """Adapt a window-based policy to the episode-state callable rollout wants."""
    return lambda state: policy.act(state.window)


# -- tanh-squashed diagonal Gaussian -------------------------------------------

def split_policy_output(out: np.ndarray) -> "StochasticPolicyOutput":
    """Split a (B, 12) stochastic-actor output into mean and clamped log-std,
    keeping the clamp mask so gradients can be zeroed where the clamp bound."""
    out = np.atleast_2d(out)
    mean = out[:, :ACTION_DIM]
    raw = out[:, ACTION_DIM:]
    log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
    mask = ((raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)).astype(np.float64)
    return StochasticPolicyOutput(mean=mean, log_std=log_std, clamp_mask=mask)


@dataclass
class StochasticPolicyOutput:
    """Diagonal Gaussian squashed through tanh.

    ``sample`` uses the reparameterized path x = mean + std*xi so gradient
    code can hold xi fixed; log-probabilities carry the change-of-variables
    correction for the squash and stay finite because of the epsilon floor.
    """

    mean: np.ndarray       # (B, 6)
    log_std: np.ndarray    # (B, 6), already clamped
    clamp_mask: np.ndarray | None = None

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    def sample(self, xi: np.ndarray):
        """Squashed action, its log-probability, and the pre-squash point."""
        x = self.mean + self.std * xi
        action = np.tanh(x)
        return action, self.log_prob_presquash(x), x

    def log_prob_presquash(self, x: np.ndarray) -> np.ndarray:
        """log pi(tanh(x) | s) for a pre-squash point x, per row."""
        z = (x - self.mean) / self.std
        gauss = -0.5 * z * z - self.log_std - 0.5 * LOG_2PI
        squash = np.log(1.0 - np.tanh(x) ** 2 + SQUASH_EPS)
        logp = (gauss - squash).sum(axis=1)
        if not np.isfinite(logp).all():
            raise AgentError("non-finite policy log-probability")
        return logp

    def entropy_gaussian(self) -> np.ndarray:
        """Entropy of the pre-squash Gaussian, per row (the tractable part)."""
        return (self.log_std + 0.5 * (1.0 + LOG_2PI)).sum(axis=1)
