"""Subject CSV ingestion, chronological splits, and sliding-window initial
states.

Input files are per-subject logs on a 5-minute grid with columns
``timestamp,glucose,carbs,bolus,basal,sleep``.  Gaps up to 15 minutes are
forward-filled (glucose and basal carried, events zeroed, rows flagged);
longer gaps split the record into segments and windows never straddle a
segment boundary.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .core import (
    DELTA_CAP_MIN,
    GLUCOSE_MAX,
    GLUCOSE_MIN,
    StateWindow,
    TICK_MINUTES,
    WINDOW_TICKS,
    sleep_flag,
)

MAX_FILL_GAP_MIN = 15
MA_SPAN_TICKS = 200
WINDOW_SHIFT_TICKS = 12

REQUIRED_COLUMNS = ("timestamp", "glucose", "carbs", "bolus", "basal")
OPTIONAL_COLUMNS = ("sleep",)


class DataError(ValueError):
    pass


class SchemaError(DataError):
    """A required column is missing or unmappable."""


class RecordTooShortError(DataError):
    pass


@dataclass
class SubjectRecord:
    """Column-oriented per-subject log.  ``segments`` are half-open tick
    ranges of contiguous 5-minute data; ``filled`` marks forward-filled
    ticks."""

    subject_id: str
    timestamps: list[datetime]
    glucose: np.ndarray
    carbs: np.ndarray
    bolus: np.ndarray
    basal: np.ndarray
    sleep: np.ndarray
    filled: np.ndarray
    segments: list[tuple[int, int]]

    @property
    def n_ticks(self) -> int:
        return len(self.timestamps)

    def segment_of(self, tick: int) -> tuple[int, int]:
        for lo, hi in self.segments:
            if lo <= tick < hi:
                return lo, hi
        raise DataError(f"tick {tick} outside every segment")

    def to_dict(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "timestamps": [t.isoformat() for t in self.timestamps],
            "glucose": self.glucose.tolist(),
            "carbs": self.carbs.tolist(),
            "bolus": self.bolus.tolist(),
            "basal": self.basal.tolist(),
            "sleep": self.sleep.tolist(),
            "filled": self.filled.astype(int).tolist(),
            "segments": [list(s) for s in self.segments],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SubjectRecord":
        return cls(
            subject_id=d["subject_id"],
            timestamps=[datetime.fromisoformat(t) for t in d["timestamps"]],
            glucose=np.asarray(d["glucose"], dtype=np.float64),
            carbs=np.asarray(d["carbs"], dtype=np.float64),
            bolus=np.asarray(d["bolus"], dtype=np.float64),
            basal=np.asarray(d["basal"], dtype=np.float64),
            sleep=np.asarray(d["sleep"], dtype=np.float64),
            filled=np.asarray(d["filled"], dtype=bool),
            segments=[tuple(s) for s in d["segments"]],
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "SubjectRecord":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _parse_row(row: dict, mapping: dict, line_no: int) -> dict:
    out = {}
    for canonical in REQUIRED_COLUMNS + OPTIONAL_COLUMNS:
        column = mapping.get(canonical, canonical)
        if column not in row:
            out[canonical] = None
            continue
        raw = (row[column] or "").strip()
        if canonical == "timestamp":
            try:
                out[canonical] = datetime.fromisoformat(raw)
            except ValueError as exc:
                raise DataError(f"line {line_no}: unparseable timestamp {raw!r}") from exc
        else:
            if raw == "":
                out[canonical] = None
            else:
                try:
                    out[canonical] = float(raw)
                except ValueError as exc:
                    raise DataError(
                        f"line {line_no}: bad {canonical} value {raw!r}") from exc
    return out


def ingest_csv(path, subject_id: str | None = None, schema: dict | None = None,
               strict: bool = False) -> SubjectRecord:
    """Read one subject log.

    ``schema`` maps canonical column names to the file's actual header names.
    Rows are sorted by timestamp; spacing must be a positive multiple of 5
    minutes.  In strict mode any gap over 15 minutes is an error instead of
    a segment break.
    """
    mapping = dict(schema or {})
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file")
        for canonical in REQUIRED_COLUMNS:
            column = mapping.get(canonical, canonical)
            if column not in reader.fieldnames:
                raise SchemaError(f"{path}: missing required column {canonical!r}")
        has_sleep = mapping.get("sleep", "sleep") in reader.fieldnames
        rows = [_parse_row(row, mapping, i + 2) for i, row in enumerate(reader)]
    if not rows:
        raise DataError(f"{path}: no data rows")
    rows.sort(key=lambda r: r["timestamp"])

    timestamps: list[datetime] = []
    cols = {name: [] for name in ("glucose", "carbs", "bolus", "basal", "sleep")}
    filled: list[bool] = []
    segments: list[tuple[int, int]] = []
    seg_start = 0

    def append(ts, glucose, carbs, bolus, basal, sleep, is_fill):
        timestamps.append(ts)
        cols["glucose"].append(float(np.clip(glucose, GLUCOSE_MIN, GLUCOSE_MAX)))
        cols["carbs"].append(max(0.0, carbs or 0.0))
        cols["bolus"].append(max(0.0, bolus or 0.0))
        cols["basal"].append(max(0.0, basal if basal is not None else 0.0))
        if has_sleep and sleep is not None:
            cols["sleep"].append(1.0 if sleep else 0.0)
        else:
            cols["sleep"].append(sleep_flag(ts.hour))
        filled.append(is_fill)

    prev = None
    for row in rows:
        ts = row["timestamp"]
        if row["glucose"] is None:
            continue  # a missing glucose reading is treated as a dropout
        if prev is not None:
            gap = (ts - prev["timestamp"]).total_seconds() / 60.0
            if gap <= 0:
                raise DataError(f"duplicate or out-of-order timestamp {ts.isoformat()}")
            if gap % TICK_MINUTES != 0:
                raise DataError(
                    f"timestamp {ts.isoformat()} is not on the 5-minute grid")
            if gap > MAX_FILL_GAP_MIN:
                if strict:
                    raise DataError(
                        f"gap of {gap:.0f} min before {ts.isoformat()} in strict mode")
                segments.append((seg_start, len(timestamps)))
                seg_start = len(timestamps)
            elif gap > TICK_MINUTES:
                n_fill = int(gap // TICK_MINUTES) - 1
                for k in range(1, n_fill + 1):
                    fill_ts = prev["timestamp"] + timedelta(minutes=TICK_MINUTES * k)
                    append(fill_ts, prev["glucose"], 0.0, 0.0, prev["basal"],
                           sleep_flag(fill_ts.hour) if not has_sleep else prev["sleep"],
                           True)
        append(ts, row["glucose"], row["carbs"], row["bolus"], row["basal"],
               row["sleep"], False)
        prev = row
    segments.append((seg_start, len(timestamps)))

    return SubjectRecord(
        subject_id=subject_id or Path(path).stem,
        timestamps=timestamps,
        glucose=np.array(cols["glucose"]),
        carbs=np.array(cols["carbs"]),
        bolus=np.array(cols["bolus"]),
        basal=np.array(cols["basal"]),
        sleep=np.array(cols["sleep"]),
        filled=np.array(filled, dtype=bool),
        segments=segments,
    )


@dataclass(frozen=True)
class TickRange:
    start: int
    stop: int

    def __post_init__(self):
        if self.start < 0 or self.stop < self.start:
            raise DataError(f"bad tick range [{self.start}, {self.stop})")

    def __len__(self) -> int:
        return self.stop - self.start


@dataclass(frozen=True)
class SplitPlan:
    predictor_train: TickRange
    rl_pool: TickRange
    rl_train: TickRange
    rl_eval: TickRange

    def to_dict(self) -> dict:
        return {name: [getattr(self, name).start, getattr(self, name).stop]
                for name in ("predictor_train", "rl_pool", "rl_train", "rl_eval")}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        return cls(**{k: TickRange(*v) for k, v in d.items()})


def make_split(record: SubjectRecord) -> SplitPlan:
    """Chronological 80/20 split, with the 20% pool split 80/20 again.

    Boundaries are floor(0.8*N) and floor(0.16*N) in integer arithmetic, so
    the plan is deterministic down to the byte.  Records of 360 ticks or
    fewer are rejected outright (their rl_eval slice could never approach a
    72-tick window); whether a given range actually holds enough windows is
    checked where windows are built.
    """
    n = record.n_ticks
    if n <= 360:
        raise RecordTooShortError(
            f"{record.subject_id}: {n} ticks, need more than 360")
    train_end = (8 * n) // 10
    rl_train_len = (16 * n) // 100
    plan = SplitPlan(
        predictor_train=TickRange(0, train_end),
        rl_pool=TickRange(train_end, n),
        rl_train=TickRange(train_end, train_end + rl_train_len),
        rl_eval=TickRange(train_end + rl_train_len, n),
    )
    assert plan.predictor_train.stop == plan.rl_pool.start
    return plan


@dataclass(frozen=True)
class InitialState:
    """A real 72-tick window lifted from the record, plus the longer glucose
    history the predictor's moving average needs."""

    subject_id: str
    window: StateWindow
    extended_glucose: np.ndarray
    origin_tick: int

    def __post_init__(self):
        ext = np.asarray(self.extended_glucose, dtype=np.float64)
        if ext.size < WINDOW_TICKS:
            raise DataError(
                f"extended_glucose holds {ext.size} ticks, need >= {WINDOW_TICKS}")
        if not np.array_equal(ext[-WINDOW_TICKS:], self.window.glucose):
            raise DataError("extended_glucose suffix disagrees with the window")
        ext.flags.writeable = False
        object.__setattr__(self, "extended_glucose", ext)

    def to_dict(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "origin_tick": self.origin_tick,
            "extended_glucose": self.extended_glucose.tolist(),
            "window": {name: np.asarray(getattr(self.window, name)).tolist()
                       for name in StateWindow.channel_names()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InitialState":
        return cls(
            subject_id=d["subject_id"],
            window=StateWindow(**{k: np.asarray(v) for k, v in d["window"].items()}),
            extended_glucose=np.asarray(d["extended_glucose"], dtype=np.float64),
            origin_tick=d["origin_tick"],
        )


def _last_event_deltas(record: SubjectRecord, events: np.ndarray) -> np.ndarray:
    """Minutes since the most recent positive event at or before each tick,
    measured on the actual timestamps (so segment gaps count as elapsed
    time), saturating at 24 h."""
    deltas = np.full(record.n_ticks, DELTA_CAP_MIN)
    last_idx = -1
    for k in range(record.n_ticks):
        if events[k] > 0:
            last_idx = k
        if last_idx >= 0:
            minutes = (record.timestamps[k] -
                       record.timestamps[last_idx]).total_seconds() / 60.0
            deltas[k] = min(minutes, DELTA_CAP_MIN)
    return deltas


def build_initial_states(record: SubjectRecord, tick_range: TickRange,
                         count: int) -> list[InitialState]:
    """Slide a 72-tick window through the range, 12 ticks per step (one
    decision hour, 83.3% overlap), skipping windows that straddle a segment
    break.  Returns at most ``count`` states."""
    if len(tick_range) < WINDOW_TICKS:
        raise DataError(
            f"range holds {len(tick_range)} ticks, shorter than one window")
    dmeal = _last_event_deltas(record, record.carbs)
    dinject = _last_event_deltas(record, record.bolus)
    hours = np.array([t.hour for t in record.timestamps])
    states = []
    for start in range(tick_range.start, tick_range.stop - WINDOW_TICKS + 1,
                       WINDOW_SHIFT_TICKS):
        stop = start + WINDOW_TICKS
        seg_lo, seg_hi = record.segment_of(start)
        if stop > seg_hi:
            continue
        window = StateWindow(
            hour_of_day=hours[start:stop],
            sleep=record.sleep[start:stop],
            glucose=record.glucose[start:stop],
            carbs=record.carbs[start:stop],
            bolus=record.bolus[start:stop],
            minutes_since_meal=dmeal[start:stop],
            minutes_since_inject=dinject[start:stop],
        )
        window.validate()
        ext_lo = max(0, stop - MA_SPAN_TICKS)
        states.append(InitialState(
            subject_id=record.subject_id,
            window=window,
            extended_glucose=record.glucose[ext_lo:stop],
            origin_tick=start,
        ))
        if len(states) == count:
            break
    return states


def save_initial_states(states: list[InitialState], path) -> None:
    with open(path, "w") as fh:
        json.dump([s.to_dict() for s in states], fh)
        fh.write("\n")


def load_initial_states(path) -> list[InitialState]:
    with open(path) as fh:
        return [InitialState.from_dict(d) for d in json.load(fh)]
