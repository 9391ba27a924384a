"""Pluggable glucose forecasters.

Both implementations share one interface: build a PredictorInput from 72
ticks of history plus the event buffer for the upcoming hour, call
``predict``, get 12 five-minute glucose values back.

``SurrogatePredictor`` integrates a small physiological model (two-compartment
carb absorption, two-stage insulin action, first-order glucose dynamics) and
serves as controllable ground truth.  ``AutoregressivePredictor`` is a ridge
regression from lagged features to the 12 future values, fitted per subject
on the chronologically earliest split.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .core import GLUCOSE_MAX, GLUCOSE_MIN, HORIZON_TICKS, TICK_MINUTES, WINDOW_TICKS
from .data import MA_SPAN_TICKS, SubjectRecord, TickRange

GLUCOSE_CLASS_HYPO = 0
GLUCOSE_CLASS_NORMAL = 1
GLUCOSE_CLASS_HYPER = 2

CLASS_HYPO_BELOW = 70.0
CLASS_HYPER_ABOVE = 180.0

MIN_FIT_TICKS = 500


class PredictorError(RuntimeError):
    pass


class SingularFitError(PredictorError):
    """Normal equations are singular; refit with a larger ridge_lambda."""


class NumericFaultError(PredictorError):
    """Surrogate integration produced non-finite values."""


def classify_glucose(g) -> np.ndarray:
    """Map glucose to {0: hypo, 1: normal, 2: hyper} with the clinical
    thresholds; vectorized."""
    g = np.asarray(g, dtype=np.float64)
    out = np.full(g.shape, GLUCOSE_CLASS_NORMAL, dtype=np.int64)
    out[g < CLASS_HYPO_BELOW] = GLUCOSE_CLASS_HYPO
    out[g > CLASS_HYPER_ABOVE] = GLUCOSE_CLASS_HYPER
    return out


def trailing_moving_average(extended: np.ndarray, out_len: int = WINDOW_TICKS,
                            span: int = MA_SPAN_TICKS) -> np.ndarray:
    """For each of the last ``out_len`` ticks, the mean of up to ``span``
    values ending at that tick (fewer when history is shorter)."""
    x = np.asarray(extended, dtype=np.float64)
    if x.size < out_len:
        raise PredictorError(
            f"history of {x.size} ticks cannot cover {out_len} outputs")
    csum = np.concatenate([[0.0], np.cumsum(x)])
    out = np.empty(out_len)
    for i, end in enumerate(range(x.size - out_len + 1, x.size + 1)):
        lo = max(0, end - span)
        out[i] = (csum[end] - csum[lo]) / (end - lo)
    return out


@dataclass(frozen=True)
class PredictorInput:
    """72 ticks of history features plus the event buffer for the hour being
    forecast.  The six history channels follow the forecaster's native
    feature set: glucose, carbs, bolus, basal (delivered units per tick),
    glucose class, and the trailing 200-tick moving average.  future_carbs /
    future_bolus hold the already-decided events of the next 12 ticks, so
    forecasts respond to what is about to be applied."""

    glucose: np.ndarray
    carbs: np.ndarray
    bolus: np.ndarray
    basal: np.ndarray
    glucose_class: np.ndarray
    ma200: np.ndarray
    future_carbs: np.ndarray = field(default_factory=lambda: np.zeros(HORIZON_TICKS))
    future_bolus: np.ndarray = field(default_factory=lambda: np.zeros(HORIZON_TICKS))

    def __post_init__(self):
        for name in ("glucose", "carbs", "bolus", "basal", "ma200"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (WINDOW_TICKS,):
                raise PredictorError(f"{name} has shape {arr.shape}, "
                                     f"expected ({WINDOW_TICKS},)")
            object.__setattr__(self, name, arr)
        cls_arr = np.asarray(self.glucose_class, dtype=np.int64)
        if cls_arr.shape != (WINDOW_TICKS,):
            raise PredictorError(f"glucose_class has shape {cls_arr.shape}")
        object.__setattr__(self, "glucose_class", cls_arr)
        for name in ("future_carbs", "future_bolus"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (HORIZON_TICKS,):
                raise PredictorError(f"{name} has shape {arr.shape}, "
                                     f"expected ({HORIZON_TICKS},)")
            object.__setattr__(self, name, arr)

    def validate(self) -> None:
        if not np.array_equal(self.glucose_class, classify_glucose(self.glucose)):
            raise PredictorError("glucose_class inconsistent with thresholds")
        for name in ("glucose", "carbs", "bolus", "basal", "ma200",
                     "future_carbs", "future_bolus"):
            if not np.isfinite(getattr(self, name)).all():
                raise PredictorError(f"{name} contains non-finite values")

    @classmethod
    def from_history(cls, glucose, carbs, bolus, basal, extended_glucose,
                     future_carbs=None, future_bolus=None) -> "PredictorInput":
        zeros = np.zeros(HORIZON_TICKS)
        return cls(
            glucose=glucose,
            carbs=carbs,
            bolus=bolus,
            basal=basal,
            glucose_class=classify_glucose(glucose),
            ma200=trailing_moving_average(extended_glucose),
            future_carbs=zeros if future_carbs is None else future_carbs,
            future_bolus=zeros if future_bolus is None else future_bolus,
        )


@dataclass(frozen=True)
class GlucoseForecast:
    """12 five-minute glucose values covering the next hour, always inside
    the sensor range."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (HORIZON_TICKS,):
            raise PredictorError(f"forecast has shape {v.shape}")
        if not np.isfinite(v).all():
            raise NumericFaultError(f"non-finite forecast: {v}")
        v = np.clip(v, GLUCOSE_MIN, GLUCOSE_MAX)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)


# --- physiological surrogate -------------------------------------------------

@dataclass(frozen=True)
class SurrogateParams:
    """Arbitrary-but-plausible physiology, tunable via config.

    gb: fasting glucose the model relaxes toward;
    p1: relaxation rate (1/min); si: insulin sensitivity scale;
    kabs: glucose rise per gram-minute of absorbing carbs;
    carb_tau / insulin_tau: total mean transit time (min) through each
    two-stage chain, so every stage runs at half the named constant — this
    puts the glucose peak after a lone 15 g meal near 60 min;
    basal_rate: the basal delivery (U/hr) at which insulin action is in
    equilibrium — the compartments track deviation from it.
    """

    gb: float = 120.0
    p1: float = 0.01
    si: float = 8e-4
    kabs: float = 0.075
    carb_tau: float = 40.0
    insulin_tau: float = 70.0
    basal_rate: float = 1.0

    SAMPLE_RANGES = {
        "gb": (105.0, 140.0),
        "p1": (0.006, 0.016),
        "si": (5e-4, 1.2e-3),
        "kabs": (0.055, 0.095),
        "carb_tau": (30.0, 50.0),
        "insulin_tau": (55.0, 90.0),
        "basal_rate": (0.8, 1.2),
    }

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "SurrogateParams":
        """Per-subject parameters drawn uniformly from the documented
        ranges; draw order is alphabetical-free and fixed."""
        return cls(**{name: float(rng.uniform(lo, hi))
                      for name, (lo, hi) in cls.SAMPLE_RANGES.items()})

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.SAMPLE_RANGES}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SurrogateParams":
        return cls(**dict(d))


@dataclass(frozen=True)
class Compartments:
    """Surrogate state: carbs on their way in (gut_new -> gut_absorbing),
    insulin action building up (plasma_insulin -> insulin_action, measured as
    deviation from basal equilibrium), and current glucose."""

    gut_new: float = 0.0
    gut_absorbing: float = 0.0
    plasma_insulin: float = 0.0
    insulin_action: float = 0.0
    glucose: float = 120.0

    def as_dict(self) -> dict:
        return {"gut_new": self.gut_new, "gut_absorbing": self.gut_absorbing,
                "plasma_insulin": self.plasma_insulin,
                "insulin_action": self.insulin_action, "glucose": self.glucose}


def surrogate_step(state: Compartments, carbs_event: float, bolus_event: float,
                   basal_rate: float, params: SurrogateParams,
                   dt: float = float(TICK_MINUTES)) -> Compartments:
    """Advance the surrogate one 5-minute tick.

    Events are impulses into the first compartment of each chain; basal
    delivery away from the configured equilibrium rate feeds the insulin
    chain continuously.  Glucose follows
    dG/dt = -p1*(G - Gb) - si*X*G + kabs*Q2 under explicit Euler, clamped to
    the sensor range.
    """
    if dt != float(TICK_MINUTES):
        raise PredictorError(f"step size is fixed at {TICK_MINUTES} min, got {dt}")
    if carbs_event < 0 or bolus_event < 0 or basal_rate < 0:
        raise PredictorError("events and basal rate must be nonnegative")
    q1 = state.gut_new + carbs_event
    i1 = state.plasma_insulin + bolus_event + (basal_rate - params.basal_rate) * dt / 60.0
    q2 = state.gut_absorbing
    x = state.insulin_action
    g = state.glucose

    carb_stage = params.carb_tau / 2.0
    insulin_stage = params.insulin_tau / 2.0
    dq1 = -q1 / carb_stage
    dq2 = (q1 - q2) / carb_stage
    di1 = -i1 / insulin_stage
    dx = (i1 - x) / insulin_stage
    dg = -params.p1 * (g - params.gb) - params.si * x * g + params.kabs * q2

    nxt = Compartments(
        gut_new=q1 + dt * dq1,
        gut_absorbing=q2 + dt * dq2,
        plasma_insulin=i1 + dt * di1,
        insulin_action=x + dt * dx,
        glucose=float(np.clip(g + dt * dg, GLUCOSE_MIN, GLUCOSE_MAX)),
    )
    for name, value in nxt.as_dict().items():
        if not np.isfinite(value):
            raise NumericFaultError(
                f"non-finite {name} after step; state was {state.as_dict()}, "
                f"events carbs={carbs_event} bolus={bolus_event} basal={basal_rate}")
    return nxt


class SurrogatePredictor:
    """Forecaster backed by the surrogate ODE.

    predict() replays the window's events to rebuild compartments and then
    integrates one hour ahead.  The environment instead keeps persistent
    compartments across steps and calls advance() for continuity.
    """

    def __init__(self, params: SurrogateParams | None = None):
        self.params = params or SurrogateParams()

    def replay(self, carbs: np.ndarray, bolus: np.ndarray,
               basal: np.ndarray, final_glucose: float) -> Compartments:
        """Rebuild event memory by running the chains over 72 history ticks.
        Glucose during replay is irrelevant (history already happened), so
        the returned state carries the observed final glucose."""
        state = Compartments(glucose=float(final_glucose))
        basal_rates = np.asarray(basal, dtype=np.float64) * (60.0 / TICK_MINUTES)
        for k in range(len(carbs)):
            state = surrogate_step(state, float(carbs[k]), float(bolus[k]),
                                   float(basal_rates[k]), self.params)
        return replace(state, glucose=float(final_glucose))

    def advance(self, state: Compartments, future_carbs, future_bolus,
                basal_rate: float) -> tuple[GlucoseForecast, Compartments]:
        """Integrate one decision hour, applying the event buffer tick by
        tick.  Returns the 12 glucose values and the end-of-hour state."""
        values = np.empty(HORIZON_TICKS)
        for k in range(HORIZON_TICKS):
            state = surrogate_step(state, float(future_carbs[k]),
                                   float(future_bolus[k]), basal_rate, self.params)
            values[k] = state.glucose
        return GlucoseForecast(values), state

    def predict(self, inp: PredictorInput) -> GlucoseForecast:
        state = self.replay(inp.carbs, inp.bolus, inp.basal, inp.glucose[-1])
        basal_rate = float(inp.basal[-1]) * (60.0 / TICK_MINUTES)
        forecast, _ = self.advance(state, inp.future_carbs, inp.future_bolus,
                                   basal_rate)
        return forecast


# --- ridge autoregressive model ----------------------------------------------

AR_DEFAULT_LAGS = 24


def _ar_features(glucose_lags, carbs_lags, bolus_lags, glucose_class,
                 ma200, future_carbs, future_bolus) -> np.ndarray:
    one_hot = np.zeros(3)
    one_hot[int(glucose_class)] = 1.0
    return np.concatenate([glucose_lags, carbs_lags, bolus_lags, one_hot,
                           [ma200], future_carbs, future_bolus])


def ar_feature_count(lags: int) -> int:
    return 3 * lags + 3 + 1 + 2 * HORIZON_TICKS


class AutoregressivePredictor:
    """Per-subject ridge regression from lagged history (plus the upcoming
    hour's event lanes) to the 12 future glucose values.

    Basal is deliberately not a feature: it is constant within a subject, so
    the intercept absorbs it; keeping it would make the normal equations
    singular at ridge_lambda=0 on clean fixtures.
    """

    def __init__(self, lags: int, ridge_lambda: float, coef: np.ndarray,
                 feature_mean: np.ndarray, feature_scale: np.ndarray,
                 target_mean: np.ndarray, train_rmse: float):
        self.lags = lags
        self.ridge_lambda = ridge_lambda
        self.coef = coef
        self.feature_mean = feature_mean
        self.feature_scale = feature_scale
        self.target_mean = target_mean
        self.train_rmse = train_rmse

    def _vector(self, inp: PredictorInput) -> np.ndarray:
        L = self.lags
        return _ar_features(inp.glucose[-L:], inp.carbs[-L:], inp.bolus[-L:],
                            inp.glucose_class[-1], inp.ma200[-1],
                            inp.future_carbs, inp.future_bolus)

    def predict(self, inp: PredictorInput) -> GlucoseForecast:
        f = (self._vector(inp) - self.feature_mean) / self.feature_scale
        return GlucoseForecast(self.target_mean + f @ self.coef)

    def to_dict(self) -> dict:
        return {
            "lags": self.lags,
            "ridge_lambda": self.ridge_lambda,
            "coef": self.coef.tolist(),
            "feature_mean": self.feature_mean.tolist(),
            "feature_scale": self.feature_scale.tolist(),
            "target_mean": self.target_mean.tolist(),
            "train_rmse": self.train_rmse,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "AutoregressivePredictor":
        return cls(
            lags=int(d["lags"]),
            ridge_lambda=float(d["ridge_lambda"]),
            coef=np.asarray(d["coef"], dtype=np.float64),
            feature_mean=np.asarray(d["feature_mean"], dtype=np.float64),
            feature_scale=np.asarray(d["feature_scale"], dtype=np.float64),
            target_mean=np.asarray(d["target_mean"], dtype=np.float64),
            train_rmse=float(d["train_rmse"]),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "AutoregressivePredictor":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _fit_samples(record: SubjectRecord, tick_range: TickRange, lags: int):
    """Anchor ticks t where the lag window and 12-tick target both stay
    inside one segment of the range."""
    xs, ys = [], []
    csum = np.concatenate([[0.0], np.cumsum(record.glucose)])
    for t in range(tick_range.start + lags - 1, tick_range.stop - HORIZON_TICKS):
        seg_lo, seg_hi = record.segment_of(t)
        if t - lags + 1 < seg_lo or t + HORIZON_TICKS >= seg_hi:
            continue
        lo = max(0, t + 1 - MA_SPAN_TICKS)
        ma_t = (csum[t + 1] - csum[lo]) / (t + 1 - lo)
        xs.append(_ar_features(
            record.glucose[t - lags + 1:t + 1],
            record.carbs[t - lags + 1:t + 1],
            record.bolus[t - lags + 1:t + 1],
            classify_glucose(record.glucose[t]),
            ma_t,
            record.carbs[t + 1:t + 1 + HORIZON_TICKS],
            record.bolus[t + 1:t + 1 + HORIZON_TICKS],
        ))
        ys.append(record.glucose[t + 1:t + 1 + HORIZON_TICKS])
    if not xs:
        raise PredictorError("no usable fit samples in range")
    return np.stack(xs), np.stack(ys)


def fit_autoregressive(record: SubjectRecord, tick_range: TickRange,
                       ridge_lambda: float,
                       lags: int = AR_DEFAULT_LAGS) -> AutoregressivePredictor:
    """Solve the ridge normal equations on standardized features.

    Features are centered and scaled internally (constant columns get scale
    1 and thus zero coefficient weight); targets are centered so the
    intercept is implicit and unpenalized.  A non-positive-definite system
    raises SingularFitError.
    """
    if ridge_lambda < 0:
        raise PredictorError("ridge_lambda must be nonnegative")
    if len(tick_range) < MIN_FIT_TICKS:
        raise PredictorError(
            f"range holds {len(tick_range)} ticks, need >= {MIN_FIT_TICKS}")
    X, Y = _fit_samples(record, tick_range, lags)
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-12] = 1.0
    Xs = (X - mean) / scale
    y_mean = Y.mean(axis=0)
    Yc = Y - y_mean
    gram = Xs.T @ Xs + ridge_lambda * np.eye(Xs.shape[1])
    try:
        chol = np.linalg.cholesky(gram)
        coef = np.linalg.solve(chol.T, np.linalg.solve(chol, Xs.T @ Yc))
    except np.linalg.LinAlgError as exc:
        raise SingularFitError(
            "normal equations are singular; increase ridge_lambda") from exc
    resid = Xs @ coef - Yc
    rmse = float(np.sqrt(np.mean(resid ** 2)))
    return AutoregressivePredictor(lags, ridge_lambda, coef, mean, scale,
                                   y_mean, rmse)
