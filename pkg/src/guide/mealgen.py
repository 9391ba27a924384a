"""Main-meal generator.

Each simulated day gets exactly three meals (breakfast, lunch, dinner).
The hour is uniform over the meal's allowed window, the five-minute slot
within that hour is uniform over 0..11, and the carbohydrate amount is a
truncated normal sampled by rejection.  Meals happen independently of the
agent; the agent only ever adds snack-like eating on top.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import N_SLOTS

# inclusive start-hour windows per meal type
MEAL_WINDOWS: dict[str, tuple[int, int]] = {
    "breakfast": (7, 9),
    "lunch": (12, 14),
    "dinner": (19, 22),
}

CARB_MEAN = 65.0
CARB_SD = 15.0
CARB_LOW = 20.0
CARB_HIGH = 100.0


@dataclass(frozen=True)
class MealEvent:
    meal_type: str
    hour: int
    slot: int
    carbs: float

    def __post_init__(self):
        lo, hi = MEAL_WINDOWS[self.meal_type]
        if not (lo <= self.hour <= hi):
            raise ValueError(f"{self.meal_type} hour {self.hour} outside [{lo}, {hi}]")
        if not (0 <= self.slot < N_SLOTS):
            raise ValueError(f"slot {self.slot} outside 0..{N_SLOTS - 1}")
        if not (CARB_LOW <= self.carbs <= CARB_HIGH):
            raise ValueError(f"carbs {self.carbs} outside [{CARB_LOW}, {CARB_HIGH}]")


@dataclass(frozen=True)
class MealSchedule:
    meals: tuple[MealEvent, ...]

    def to_dict(self) -> dict:
        return {"meals": [{"meal_type": m.meal_type, "hour": m.hour,
                           "slot": m.slot, "carbs": m.carbs} for m in self.meals]}

    @classmethod
    def from_dict(cls, d: dict) -> "MealSchedule":
        return cls(tuple(MealEvent(**m) for m in d["meals"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "MealSchedule":
        return cls.from_dict(json.loads(s))


def truncated_normal(rng: np.random.Generator, mean: float, sd: float,
                     low: float, high: float) -> float:
    """Rejection sampler; acceptance is ~0.99 at the meal parameters so the
    loop is effectively a single draw."""
    while True:
        x = rng.normal(mean, sd)
        if low <= x <= high:
            return float(x)


def sample_schedule(seed) -> MealSchedule:
    """Deterministic per seed.  Draw order is fixed (breakfast, lunch,
    dinner; hour, slot, carbs) so schedules replay exactly."""
    rng = np.random.default_rng(seed)
    meals = []
    for meal_type in ("breakfast", "lunch", "dinner"):
        lo, hi = MEAL_WINDOWS[meal_type]
        hour = int(rng.integers(lo, hi + 1))
        slot = int(rng.integers(0, N_SLOTS))
        carbs = truncated_normal(rng, CARB_MEAN, CARB_SD, CARB_LOW, CARB_HIGH)
        meals.append(MealEvent(meal_type, hour, slot, carbs))
    return MealSchedule(tuple(meals))


def meals_in_hour(schedule: MealSchedule, hour: int) -> list[tuple[int, float]]:
    """(slot, carbs) for every scheduled meal landing in the given hour.
    The meal windows are disjoint, so at most one event comes back."""
    if not (0 <= hour <= 23):
        raise ValueError(f"hour {hour} outside 0..23")
    return [(m.slot, m.carbs) for m in schedule.meals if m.hour == hour]
