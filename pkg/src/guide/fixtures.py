"""Synthetic subject generator.

Real CGM/pump exports are not bundled, so experiments and tests run on
simulated subjects: the physiological surrogate driven by generated meals
and a simple rule-following patient (correction boluses on highs, rescue
carbs on lows), with sensor noise on the recorded glucose.
"""
from __future__ import annotations

import csv
from datetime import datetime, timedelta

import numpy as np

from .core import TICK_MINUTES, TICKS_PER_DAY, sleep_flag
from .data import SubjectRecord
from .mealgen import sample_schedule
from .predictor import Compartments, SurrogateParams, surrogate_step

DEFAULT_START = datetime(2024, 1, 1, 0, 0)


def simulate_subject(subject_id: str, days: int, seed: int,
                     params: SurrogateParams | None = None,
                     noise_sd: float = 2.0,
                     start: datetime = DEFAULT_START) -> SubjectRecord:
    """Run the surrogate for ``days`` simulated days of 5-minute ticks.

    The virtual patient boluses (g-180)/30 units, clamped to the pen's
    2..15 U range, when glucose tops 180 with no bolus in the last two
    hours, and eats 20 g rescue carbs under 75 with no carbs in the last
    hour.  Recorded glucose carries additive sensor noise.
    """
    params = params or SurrogateParams()
    rng = np.random.default_rng(seed)
    n = days * TICKS_PER_DAY
    state = Compartments(glucose=params.gb)
    glucose = np.empty(n)
    carbs = np.zeros(n)
    bolus = np.zeros(n)
    minutes_since_bolus = 1440.0
    minutes_since_carbs = 1440.0

    meal_by_tick: dict[int, float] = {}
    for day in range(days):
        schedule = sample_schedule((seed, day))
        for meal in schedule.meals:
            tick = day * TICKS_PER_DAY + meal.hour * 12 + meal.slot
            meal_by_tick[tick] = meal_by_tick.get(tick, 0.0) + meal.carbs

    for k in range(n):
        g = state.glucose
        carb_event = meal_by_tick.get(k, 0.0)
        bolus_event = 0.0
        if g > 180.0 and minutes_since_bolus >= 120.0:
            bolus_event = float(np.clip((g - 180.0) / 30.0, 2.0, 15.0))
        elif g < 75.0 and minutes_since_carbs >= 60.0:
            carb_event += 20.0
        if carb_event > 0:
            minutes_since_carbs = 0.0
        if bolus_event > 0:
            minutes_since_bolus = 0.0
        state = surrogate_step(state, carb_event, bolus_event,
                               params.basal_rate, params)
        glucose[k] = np.clip(state.glucose + rng.normal(0.0, noise_sd), 20.0, 600.0)
        carbs[k] = carb_event
        bolus[k] = bolus_event
        minutes_since_bolus += TICK_MINUTES
        minutes_since_carbs += TICK_MINUTES

    timestamps = [start + timedelta(minutes=TICK_MINUTES * k) for k in range(n)]
    return SubjectRecord(
        subject_id=subject_id,
        timestamps=timestamps,
        glucose=glucose,
        carbs=carbs,
        bolus=bolus,
        basal=np.full(n, params.basal_rate),
        sleep=np.array([sleep_flag(t.hour) for t in timestamps]),
        filled=np.zeros(n, dtype=bool),
        segments=[(0, n)],
    )


def write_subject_csv(record: SubjectRecord, path) -> None:
    """Write the canonical CSV schema.  The basal column is the delivery
    rate in U/hr, matching pump export conventions."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "glucose", "carbs", "bolus", "basal", "sleep"])
        for k in range(record.n_ticks):
            writer.writerow([
                record.timestamps[k].isoformat(),
                f"{record.glucose[k]:.1f}",
                f"{record.carbs[k]:.1f}",
                f"{record.bolus[k]:.2f}",
                f"{record.basal[k]:.2f}",
                int(record.sleep[k]),
            ])


def make_fixture_csv(path, subject_id: str, days: int, seed: int,
                     params: SurrogateParams | None = None,
                     noise_sd: float = 2.0) -> SubjectRecord:
    record = simulate_subject(subject_id, days, seed, params, noise_sd)
    write_subject_csv(record, path)
    return record
