"""Replay buffer and offline buffer construction.

The buffer stores transitions as dense arrays (windows in channel-stacked
(72, 7) form) so training can featurize whole batches at once.  Offline
buffers are frozen after construction and never grow during training; the
online SAC variant keeps the same structure but overwrites oldest-first once
full.

On disk a buffer is a single binary file: magic, a length-prefixed JSON
header (schema version, subject, seed, fill level), then the raw array bytes
in a fixed order.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from typing import Sequence

import numpy as np

from ..core import ACTION_DIM, Transition, WINDOW_TICKS
from ..env import EnvError, GlucoseEnv
from ..predictor import NumericFaultError

log = logging.getLogger(__name__)

MAGIC = b"GBUF"
SCHEMA_VERSION = 1


class BufferError(RuntimeError):
    pass


class ReplayBuffer:
    """Fixed-capacity uniform-sampling transition store.

    ``add`` appends until capacity, then wraps around oldest-first; sampling
    draws only from the filled region.  ``freeze()`` makes the contents
    immutable, which is how every offline buffer is handed to training.
    """

    def __init__(self, capacity: int, seed: int, subject_id: str | None = None):
        if capacity <= 0:
            raise BufferError(f"capacity={capacity} must be positive")
        self.capacity = int(capacity)
        self.seed = int(seed)
        self.subject_id = subject_id
        self.states = np.zeros((capacity, WINDOW_TICKS, 7))
        self.actions = np.zeros((capacity, ACTION_DIM))
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, WINDOW_TICKS, 7))
        self.dones = np.zeros(capacity, dtype=np.int8)
        self.size = 0
        self._cursor = 0
        self._frozen = False
        self._rng = np.random.default_rng(seed)

    def add(self, state: np.ndarray, action: np.ndarray, reward: float,
            next_state: np.ndarray, done: int) -> None:
        if self._frozen:
            raise BufferError("buffer is frozen")
        k = self._cursor
        self.states[k] = state
        self.actions[k] = action
        self.rewards[k] = reward
        self.next_states[k] = next_state
        self.dones[k] = done
        self._cursor = (k + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def add_transition(self, t: Transition) -> None:
        self.add(t.state.to_array(), t.action, t.reward,
                 t.next_state.to_array(), t.done)

    def freeze(self) -> None:
        self._frozen = True

    @property
    def frozen(self) -> bool:
        return self._frozen

    def sample(self, batch_size: int) -> dict[str, np.ndarray]:
        if self.size == 0:
            raise BufferError("cannot sample from an empty buffer")
        idx = self._rng.integers(0, self.size, size=batch_size)
        return {
            "states": self.states[idx],
            "actions": self.actions[idx],
            "rewards": self.rewards[idx],
            "next_states": self.next_states[idx],
            "dones": self.dones[idx].astype(np.float64),
        }

    def checksum(self) -> str:
        h = hashlib.sha256()
        n = self.size
        for arr in (self.states[:n], self.actions[:n], self.rewards[:n],
                    self.next_states[:n], self.dones[:n]):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        n = self.size
        header = {
            "schema_version": SCHEMA_VERSION,
            "subject": self.subject_id,
            "seed": self.seed,
            "size": n,
            "capacity": self.capacity,
            "frozen": self._frozen,
        }
        payload = json.dumps(header).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(payload)))
            fh.write(payload)
            for arr in (self.states[:n], self.actions[:n], self.rewards[:n],
                        self.next_states[:n], self.dones[:n]):
                fh.write(np.ascontiguousarray(arr).tobytes())

    @classmethod
    def load(cls, path) -> "ReplayBuffer":
        with open(path, "rb") as fh:
            if fh.read(4) != MAGIC:
                raise BufferError(f"{path} is not a buffer file")
            (hlen,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(hlen).decode("utf-8"))
            if header["schema_version"] != SCHEMA_VERSION:
                raise BufferError(
                    f"unsupported buffer schema {header['schema_version']}")
            n = header["size"]
            buf = cls(header["capacity"], header["seed"], header["subject"])
            specs = [
                ("states", (n, WINDOW_TICKS, 7), np.float64),
                ("actions", (n, ACTION_DIM), np.float64),
                ("rewards", (n,), np.float64),
                ("next_states", (n, WINDOW_TICKS, 7), np.float64),
                ("dones", (n,), np.int8),
            ]
            for name, shape, dtype in specs:
                count = int(np.prod(shape))
                raw = fh.read(count * np.dtype(dtype).itemsize)
                if len(raw) != count * np.dtype(dtype).itemsize:
                    raise BufferError(f"{path} truncated while reading {name}")
                getattr(buf, name)[:n] = np.frombuffer(
                    raw, dtype=dtype).reshape(shape)
        buf.size = n
        buf._cursor = n % buf.capacity
        if header["frozen"]:
            buf.freeze()
        return buf


def build_offline_buffer(env: GlucoseEnv, initial_states: Sequence,
                         behavior_policy, seed: int,
                         target_size: int = 4800,
                         subject_id: str | None = None) -> ReplayBuffer:
    """Fill a buffer by rolling full episodes under the behavior policy.

    Episodes cycle through the initial states in order; each gets a fresh
    meal-schedule seed derived from ``seed``.  An episode that fails inside
    the environment is logged and discarded rather than killing the build.
    The returned buffer is frozen.
    """
    if not initial_states:
        raise BufferError("need at least one initial state")
    buffer = ReplayBuffer(target_size, seed=seed, subject_id=subject_id)
    episode = 0
    while buffer.size < target_size:
        initial = initial_states[episode % len(initial_states)]
        episode_seed = int(np.random.SeedSequence([seed, episode]).generate_state(1)[0])
        episode += 1
        try:
            state = env.reset(initial, seed=episode_seed)
            staged = []
            while not state.done and buffer.size + len(staged) < target_size:
                raw = behavior_policy.act(state.window)
                result = env.step(state, raw)
                staged.append((state.window.to_array(), np.asarray(raw),
                               result.reward_scaled,
                               result.next_state.window.to_array(),
                               result.done))
                state = result.next_state
        except (EnvError, NumericFaultError) as exc:
            log.warning("discarding episode %d: %s", episode - 1, exc)
            continue
        for item in staged:
            buffer.add(*item)
    buffer.freeze()
    return buffer
