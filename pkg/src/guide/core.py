"""Shared domain types for the glucose workbench.

Everything downstream (environment, agents, service) speaks in terms of the
types defined here: a six-hour state window sampled every five minutes, and a
six-dimensional continuous action vector that decodes into a behavioral
action (do nothing, eat, or inject, plus magnitude and timing).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

TICK_MINUTES = 5
TICKS_PER_HOUR = 12
TICKS_PER_DAY = 288
WINDOW_TICKS = 72            # six hours of history
HORIZON_TICKS = 12           # one decision hour of forecast
DECISION_STEPS_PER_DAY = 24

GLUCOSE_MIN = 20.0
GLUCOSE_MAX = 600.0
CARB_MIN_G = 5.0
CARB_MAX_G = 50.0
INSULIN_MIN_U = 2.0
INSULIN_MAX_U = 15.0
N_SLOTS = 12
DELTA_CAP_MIN = 1440.0       # elapsed-time channels saturate at 24 h

ACTION_DIM = 6


class ValidationError(ValueError):
    """Raised when a domain object violates its invariants."""


class ActionType(IntEnum):
    NOTHING = 0
    EAT = 1
    INJECT = 2


def _readonly(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class StateWindow:
    """72 ticks x 7 channels of recent history, oldest tick first.

    Channels: hour of day (int 0..23), sleep flag (0/1), glucose (mg/dL),
    carbs eaten at the tick (g), bolus injected at the tick (U), and minutes
    since the last meal / last injection.  The elapsed-time channels reset to
    zero on the tick carrying the event, grow by five per tick, and saturate
    at 1440 once the last event is a day or more in the past (or unknown).
    """

    hour_of_day: np.ndarray
    sleep: np.ndarray
    glucose: np.ndarray
    carbs: np.ndarray
    bolus: np.ndarray
    minutes_since_meal: np.ndarray
    minutes_since_inject: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "hour_of_day",
                           _readonly(np.asarray(self.hour_of_day, dtype=np.int64)))
        for name in ("sleep", "glucose", "carbs", "bolus",
                     "minutes_since_meal", "minutes_since_inject"):
            object.__setattr__(self, name,
                               _readonly(np.asarray(getattr(self, name), dtype=np.float64)))
        for name in self.channel_names():
            arr = getattr(self, name)
            if arr.shape != (WINDOW_TICKS,):
                raise ValidationError(
                    f"channel {name!r} has shape {arr.shape}, expected ({WINDOW_TICKS},)")

    @staticmethod
    def channel_names() -> tuple[str, ...]:
        return ("hour_of_day", "sleep", "glucose", "carbs", "bolus",
                "minutes_since_meal", "minutes_since_inject")

    def validate(self) -> None:
        """Check every channel invariant; raises ValidationError with the
        offending channel and tick index."""
        h = self.hour_of_day
        if ((h < 0) | (h > 23)).any():
            k = int(np.argmax((h < 0) | (h > 23)))
            raise ValidationError(f"hour_of_day[{k}]={h[k]} outside 0..23")
        for k in range(1, WINDOW_TICKS):
            step = (h[k] - h[k - 1]) % 24
            if step not in (0, 1):
                raise ValidationError(
                    f"hour_of_day[{k}]={h[k]} does not follow {h[k - 1]} on the clock")
        if not np.isin(self.sleep, (0.0, 1.0)).all():
            k = int(np.argmax(~np.isin(self.sleep, (0.0, 1.0))))
            raise ValidationError(f"sleep[{k}]={self.sleep[k]} is not 0/1")
        if ((self.glucose < GLUCOSE_MIN) | (self.glucose > GLUCOSE_MAX)).any():
            bad = (self.glucose < GLUCOSE_MIN) | (self.glucose > GLUCOSE_MAX)
            k = int(np.argmax(bad))
            raise ValidationError(
                f"glucose[{k}]={self.glucose[k]} outside [{GLUCOSE_MIN}, {GLUCOSE_MAX}]")
        if (self.carbs < 0).any():
            k = int(np.argmax(self.carbs < 0))
            raise ValidationError(f"carbs[{k}]={self.carbs[k]} negative")
        if (self.bolus < 0).any():
            k = int(np.argmax(self.bolus < 0))
            raise ValidationError(f"bolus[{k}]={self.bolus[k]} negative")
        self._validate_delta("minutes_since_meal", self.minutes_since_meal, self.carbs)
        self._validate_delta("minutes_since_inject", self.minutes_since_inject, self.bolus)

    @staticmethod
    def _validate_delta(name: str, delta: np.ndarray, events: np.ndarray) -> None:
        if ((delta < 0) | (delta > DELTA_CAP_MIN)).any():
            bad = (delta < 0) | (delta > DELTA_CAP_MIN)
            k = int(np.argmax(bad))
            raise ValidationError(f"{name}[{k}]={delta[k]} outside [0, {DELTA_CAP_MIN}]")
        for k in range(WINDOW_TICKS):
            if events[k] > 0 and delta[k] != 0.0:
                raise ValidationError(
                    f"{name}[{k}]={delta[k]} but an event happened on that tick")
            if k == 0:
                continue
            grown = min(delta[k - 1] + TICK_MINUTES, DELTA_CAP_MIN)
            if delta[k] != 0.0 and delta[k] != grown:
                raise ValidationError(
                    f"{name}[{k}]={delta[k]} is neither a reset nor {grown}")

    def to_array(self) -> np.ndarray:
        """Stack channels into a (72, 7) float array, channel order as above."""
        return np.stack([np.asarray(getattr(self, n), dtype=np.float64)
                         for n in self.channel_names()], axis=1)


@dataclass(frozen=True)
class BehavioralAction:
    """Decoded action: a type plus the magnitude/timing fields.

    All magnitude fields are always populated; only the ones matching
    ``action_type`` have an effect when the action is applied.
    """

    action_type: ActionType
    carb_amount: float       # g, in [5, 50]
    insulin_amount: float    # U, in [2, 15]
    slot: int                # 5-min slot within the upcoming hour, 0..11

    def __post_init__(self):
        if not isinstance(self.action_type, ActionType):
            object.__setattr__(self, "action_type", ActionType(self.action_type))
        if not (CARB_MIN_G <= self.carb_amount <= CARB_MAX_G):
            raise ValidationError(
                f"carb_amount={self.carb_amount} outside [{CARB_MIN_G}, {CARB_MAX_G}]")
        if not (INSULIN_MIN_U <= self.insulin_amount <= INSULIN_MAX_U):
            raise ValidationError(
                f"insulin_amount={self.insulin_amount} outside "
                f"[{INSULIN_MIN_U}, {INSULIN_MAX_U}]")
        if not (0 <= self.slot < N_SLOTS) or int(self.slot) != self.slot:
            raise ValidationError(f"slot={self.slot} not an integer in 0..{N_SLOTS - 1}")
        object.__setattr__(self, "slot", int(self.slot))


def decode_action(values) -> BehavioralAction:
    """Map a raw vector in [-1, 1]^6 to a behavioral action.

    Components 0..2 are selection scores for NOTHING/EAT/INJECT (highest
    wins, first index wins ties), 3 is the carb amount, 4 the insulin dose,
    5 the timing slot.  Magnitudes rescale linearly onto their clinical
    ranges; the slot maps through floor((v+1)/2 * 12) capped at 11.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.shape != (ACTION_DIM,):
        raise ValidationError(f"action vector has shape {v.shape}, expected ({ACTION_DIM},)")
    if not np.isfinite(v).all():
        k = int(np.argmax(~np.isfinite(v)))
        raise ValidationError(f"action[{k}]={v[k]} is not finite")
    for k in range(ACTION_DIM):
        if not (-1.0 <= v[k] <= 1.0):
            raise ValidationError(f"action[{k}]={v[k]} outside [-1, 1]")
    action_type = ActionType(int(np.argmax(v[:3])))
    carbs = CARB_MIN_G + (v[3] + 1.0) / 2.0 * (CARB_MAX_G - CARB_MIN_G)
    insulin = INSULIN_MIN_U + (v[4] + 1.0) / 2.0 * (INSULIN_MAX_U - INSULIN_MIN_U)
    slot = min(N_SLOTS - 1, int(math.floor((v[5] + 1.0) / 2.0 * N_SLOTS)))
    return BehavioralAction(action_type, carbs, insulin, slot)


def encode_action(action: BehavioralAction) -> np.ndarray:
    """Inverse of decode_action, up to float rounding on the magnitudes.

    The chosen type gets score +1 and the others -1.  Slot 0 encodes to the
    left edge -1; other slots encode to their bin midpoint (2k+1)/12 - 1,
    which keeps the floor in decode_action exact under float rounding.
    """
    v = np.full(ACTION_DIM, -1.0)
    v[int(action.action_type)] = 1.0
    v[3] = 2.0 * (action.carb_amount - CARB_MIN_G) / (CARB_MAX_G - CARB_MIN_G) - 1.0
    v[4] = 2.0 * (action.insulin_amount - INSULIN_MIN_U) / (INSULIN_MAX_U - INSULIN_MIN_U) - 1.0
    v[5] = -1.0 if action.slot == 0 else (2 * action.slot + 1) / 12.0 - 1.0
    return v


@dataclass(frozen=True)
class Transition:
    """One decision step of experience, as stored in replay buffers."""

    state: StateWindow
    action: np.ndarray          # raw vector in [-1, 1]^6
    reward: float
    next_state: StateWindow
    done: int

    def __post_init__(self):
        a = np.asarray(self.action, dtype=np.float64)
        if a.shape != (ACTION_DIM,):
            raise ValidationError(f"transition action has shape {a.shape}")
        object.__setattr__(self, "action", _readonly(a.copy()))
        if self.done not in (0, 1):
            raise ValidationError(f"done={self.done} is not 0/1")


def sleep_flag(hour: int) -> float:
    """Resting-hours indicator used when a data source lacks a sleep column:
    1 from 23:00 up to (not including) 07:00."""
    return 1.0 if (hour >= 23 or hour < 7) else 0.0
