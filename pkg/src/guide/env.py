"""Closed-loop decision environment.

Composes agent actions with generated meals, invokes a glucose forecaster,
advances the seven state channels an hour at a time, and scores each decision
with the clinically structured reward.  One episode is a simulated day of 24
hourly decisions.

Two forecaster modes share the loop: a physiological surrogate threads its
compartment state from step to step, while a fitted autoregressive model is
called statelessly on the window it is shown.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .core import (
    ActionType,
    DECISION_STEPS_PER_DAY,
    DELTA_CAP_MIN,
    HORIZON_TICKS,
    StateWindow,
    TICK_MINUTES,
    ValidationError,
    WINDOW_TICKS,
    decode_action,
    sleep_flag,
)
from .data import InitialState, MA_SPAN_TICKS
from .mealgen import MealSchedule, meals_in_hour, sample_schedule
from .predictor import (
    Compartments,
    GlucoseForecast,
    PredictorInput,
    SurrogatePredictor,
)
from .reward import RewardConfig, RewardState, total_reward


class EnvError(RuntimeError):
    pass


class EpisodeDoneError(EnvError):
    """Raised when stepping an episode whose 24 decisions are spent."""


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.asarray(a, dtype=np.float64).copy()
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class EpisodeState:
    """Everything one episode carries between decisions.

    ``extended_glucose`` is the trailing glucose history the forecaster's
    long moving average needs; the environment owns it because the agent's
    window is only six hours deep.  ``compartments`` is populated only when
    the forecaster is the stateful surrogate.  ``prev_action_type`` feeds the
    repetition rule and is None before the first decision.
    """

    window: StateWindow
    extended_glucose: np.ndarray
    schedule: MealSchedule
    decision_step: int
    clock_hour: int
    prev_action_type: ActionType | None = None
    compartments: Compartments | None = None

    def __post_init__(self):
        object.__setattr__(self, "extended_glucose",
                           _readonly(self.extended_glucose))
        if not (0 <= self.decision_step <= DECISION_STEPS_PER_DAY):
            raise ValidationError(
                f"decision_step={self.decision_step} outside 0..{DECISION_STEPS_PER_DAY}")
        if not (0 <= self.clock_hour <= 23):
            raise ValidationError(f"clock_hour={self.clock_hour} outside 0..23")
        if self.clock_hour != int(self.window.hour_of_day[-1]):
            raise ValidationError(
                f"clock_hour={self.clock_hour} disagrees with the window's final "
                f"hour {int(self.window.hour_of_day[-1])}")
        n = len(self.extended_glucose)
        if n < WINDOW_TICKS:
            raise ValidationError(
                f"extended_glucose has {n} ticks, needs at least {WINDOW_TICKS}")
        if not np.array_equal(self.extended_glucose[-WINDOW_TICKS:],
                              self.window.glucose):
            raise ValidationError(
                "extended_glucose suffix disagrees with the window's glucose")

    @property
    def done(self) -> bool:
        return self.decision_step >= DECISION_STEPS_PER_DAY

    def to_dict(self) -> dict:
        return {
            "window": {name: np.asarray(getattr(self.window, name)).tolist()
                       for name in StateWindow.channel_names()},
            "extended_glucose": self.extended_glucose.tolist(),
            "schedule": self.schedule.to_dict(),
            "decision_step": self.decision_step,
            "clock_hour": self.clock_hour,
            "prev_action_type": (None if self.prev_action_type is None
                                 else int(self.prev_action_type)),
            "compartments": (None if self.compartments is None
                             else self.compartments.as_dict()),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeState":
        return cls(
            window=StateWindow(**{k: np.asarray(v) for k, v in d["window"].items()}),
            extended_glucose=np.asarray(d["extended_glucose"], dtype=np.float64),
            schedule=MealSchedule.from_dict(d["schedule"]),
            decision_step=int(d["decision_step"]),
            clock_hour=int(d["clock_hour"]),
            prev_action_type=(None if d["prev_action_type"] is None
                              else ActionType(d["prev_action_type"])),
            compartments=(None if d["compartments"] is None
                          else Compartments(**d["compartments"])),
        )


class AppliedEvent(NamedTuple):
    slot: int          # tick offset 0..11 within the decision hour
    kind: str          # "carb" or "bolus"
    magnitude: float   # g or U


@dataclass(frozen=True)
class StepResult:
    next_state: EpisodeState
    reward_scaled: float
    reward_breakdown: dict[str, float]
    done: int
    forecast: GlucoseForecast
    applied_events: tuple[AppliedEvent, ...]


def _advance_delta(prev: float, events: np.ndarray) -> np.ndarray:
    out = np.empty(HORIZON_TICKS)
    for i in range(HORIZON_TICKS):
        if events[i] > 0:
            prev = 0.0
        else:
            prev = min(prev + TICK_MINUTES, DELTA_CAP_MIN)
        out[i] = prev
    return out


class GlucoseEnv:
    """The decision loop: meals + agent events -> forecast -> reward -> next window.

    ``predictor`` is anything with a ``predict(PredictorInput) -> GlucoseForecast``
    method; a ``SurrogatePredictor`` is recognized and run statefully through
    its compartment model instead.  ``basal_rate`` (U/hr) is the subject's
    constant background insulin, supplied by the environment because the agent
    state carries no basal channel.
    """

    def __init__(self, predictor, reward: RewardConfig | None = None,
                 basal_rate: float = 1.0,
                 sleep_rule: Callable[[int], float] = sleep_flag):
        if basal_rate < 0:
            raise EnvError(f"basal_rate={basal_rate} must be nonnegative")
        self.predictor = predictor
        self.reward = reward if reward is not None else RewardConfig()
        self.basal_rate = float(basal_rate)
        self.sleep_rule = sleep_rule
        self._stateful = isinstance(predictor, SurrogatePredictor)
        # Total step() calls over the env's lifetime.  Offline training must
        # leave this untouched; tests pin that invariant.
        self.step_count = 0

    # -- episode lifecycle ---------------------------------------------------

    def reset(self, initial: InitialState, seed: int) -> EpisodeState:
        initial.window.validate()
        compartments = None
        if self._stateful:
            basal = np.full(WINDOW_TICKS, self.basal_rate / 12.0)
            compartments = self.predictor.replay(
                initial.window.carbs, initial.window.bolus, basal,
                float(initial.window.glucose[-1]))
        return EpisodeState(
            window=initial.window,
            extended_glucose=initial.extended_glucose,
            schedule=sample_schedule(seed),
            decision_step=0,
            clock_hour=int(initial.window.hour_of_day[-1]),
            prev_action_type=None,
            compartments=compartments,
        )

    def step(self, state: EpisodeState, raw) -> StepResult:
        if state.done:
            raise EpisodeDoneError(
                f"episode already finished its {DECISION_STEPS_PER_DAY} decisions")
        self.step_count += 1
        action = decode_action(raw)
        hour = (state.clock_hour + 1) % 24

        carb_buf = np.zeros(HORIZON_TICKS)
        bolus_buf = np.zeros(HORIZON_TICKS)
        events: list[AppliedEvent] = []
        for slot, grams in meals_in_hour(state.schedule, hour):
            carb_buf[slot] += grams
            events.append(AppliedEvent(slot, "carb", float(grams)))
        if action.action_type == ActionType.EAT:
            carb_buf[action.slot] += action.carb_amount
            events.append(AppliedEvent(action.slot, "carb", action.carb_amount))
        elif action.action_type == ActionType.INJECT:
            bolus_buf[action.slot] += action.insulin_amount
            events.append(AppliedEvent(action.slot, "bolus", action.insulin_amount))
        events.sort(key=lambda e: (e.slot, e.kind))

        forecast, compartments = self._forecast(state, carb_buf, bolus_buf)

        reward_scaled, breakdown = total_reward(
            RewardState(state.window, state.prev_action_type),
            action, forecast, self.reward.rules, self.reward.glycemic)

        w = state.window
        new_window = StateWindow(
            hour_of_day=np.concatenate([w.hour_of_day[HORIZON_TICKS:],
                                        np.full(HORIZON_TICKS, hour, dtype=np.int64)]),
            sleep=np.concatenate([w.sleep[HORIZON_TICKS:],
                                  np.full(HORIZON_TICKS, float(self.sleep_rule(hour)))]),
            glucose=np.concatenate([w.glucose[HORIZON_TICKS:], forecast.values]),
            carbs=np.concatenate([w.carbs[HORIZON_TICKS:], carb_buf]),
            bolus=np.concatenate([w.bolus[HORIZON_TICKS:], bolus_buf]),
            minutes_since_meal=np.concatenate(
                [w.minutes_since_meal[HORIZON_TICKS:],
                 _advance_delta(float(w.minutes_since_meal[-1]), carb_buf)]),
            minutes_since_inject=np.concatenate(
                [w.minutes_since_inject[HORIZON_TICKS:],
                 _advance_delta(float(w.minutes_since_inject[-1]), bolus_buf)]),
        )
        extended = np.concatenate([state.extended_glucose,
                                   forecast.values])[-MA_SPAN_TICKS:]

        next_state = EpisodeState(
            window=new_window,
            extended_glucose=extended,
            schedule=state.schedule,
            decision_step=state.decision_step + 1,
            clock_hour=hour,
            prev_action_type=action.action_type,
            compartments=compartments,
        )
        return StepResult(
            next_state=next_state,
            reward_scaled=reward_scaled,
            reward_breakdown=breakdown,
            done=int(next_state.done),
            forecast=forecast,
            applied_events=tuple(events),
        )

    # -- internals -----------------------------------------------------------

    def _forecast(self, state: EpisodeState, carb_buf: np.ndarray,
                  bolus_buf: np.ndarray):
        if self._stateful:
            return self.predictor.advance(state.compartments, carb_buf,
                                          bolus_buf, self.basal_rate)
        inp = PredictorInput.from_history(
            glucose=state.window.glucose,
            carbs=state.window.carbs,
            bolus=state.window.bolus,
            basal=np.full(WINDOW_TICKS, self.basal_rate / 12.0),
            extended_glucose=state.extended_glucose,
            future_carbs=carb_buf,
            future_bolus=bolus_buf,
        )
        return self.predictor.predict(inp), None


def rollout(env: GlucoseEnv, initial: InitialState, seed: int,
            policy: Callable[[EpisodeState], np.ndarray]) -> list[StepResult]:
    """Run one full episode under ``policy`` and return all 24 step results."""
    state = env.reset(initial, seed)
    results = []
    while not state.done:
        result = env.step(state, policy(state))
        results.append(result)
        state = result.next_state
    return results


# -- trajectory persistence (JSON lines, one decision per line) ---------------

def step_result_to_dict(result: StepResult) -> dict:
    return {
        "decision_step": result.next_state.decision_step,
        "clock_hour": result.next_state.clock_hour,
        "reward_scaled": result.reward_scaled,
        "reward_breakdown": dict(result.reward_breakdown),
        "done": result.done,
        "forecast": result.forecast.values.tolist(),
        "applied_events": [[e.slot, e.kind, e.magnitude]
                           for e in result.applied_events],
    }


def write_trajectory(path, results: Sequence[StepResult]) -> None:
    with open(path, "w") as fh:
        for result in results:
            fh.write(json.dumps(step_result_to_dict(result)) + "\n")


def read_trajectory(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
