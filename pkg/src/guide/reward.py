"""Clinically structured reward: glycemic forecast term plus rule-based
behavioral terms.

The glycemic term scores each of the 12 forecast values with a piecewise
function that peaks at a target glucose and penalizes excursions, with a
much steeper slope on the low side.  Behavioral terms come from a table of
bounded piecewise-linear rules over the state window and the decoded
action; each rule contributes clip(alpha * f, lower, upper) to one of five
components (meal, insulin, sleep, stability, repetition).  The total is
scaled by 1/1000 before agents see it.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .core import ActionType, BehavioralAction, StateWindow, TICK_MINUTES

SCALE_DIVISOR = 1000.0

BREAKDOWN_TERMS = ("glucose", "meal", "insulin", "sleep", "stability", "repetition")

# rule component token -> breakdown term it feeds
COMPONENT_TERM = {
    "eat": "meal",
    "inj": "insulin",
    "sleep": "sleep",
    "stab": "stability",
    "rep": "repetition",
}

# published coefficient ranges, inclusive
ALPHA_RANGES = {
    "eat": (5.0, 200.0),
    "inj": (10.0, 2000.0),
    "sleep": (50.0, 100.0),
    "stab": (50.0, 50.0),
    "rep": (1000.0, 1000.0),
}


class ConfigError(ValueError):
    """Raised for invalid reward configuration."""


@dataclass(frozen=True)
class GlycemicParams:
    t_hypo: float = 70.0
    t_hyper: float = 180.0
    g_star: float = 125.0
    lambda_hypo: float = 7.0
    lambda_hyper: float = 2.0
    lambda_normal: float = 100.0

    def __post_init__(self):
        if not (self.t_hypo < self.g_star < self.t_hyper):
            raise ConfigError(
                f"need t_hypo < g_star < t_hyper, got {self.t_hypo}, "
                f"{self.g_star}, {self.t_hyper}")
        for name in ("lambda_hypo", "lambda_hyper", "lambda_normal"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")


def glycemic_point_reward(g: float, params: GlycemicParams) -> float:
    """Score a single glucose value.

    Below t_hypo: -lambda_hypo * (t_hypo - g).  Above t_hyper:
    -lambda_hyper * (g - t_hyper).  In range: a tent peaking at g_star with
    value lambda_normal, hitting exactly 0 at both thresholds, so the three
    branches join continuously.
    """
    if not np.isfinite(g):
        raise ValueError(f"glucose value {g} is not finite")
    if g < params.t_hypo:
        return -params.lambda_hypo * (params.t_hypo - g)
    if g > params.t_hyper:
        return -params.lambda_hyper * (g - params.t_hyper)
    span = params.t_hyper - params.t_hypo
    return params.lambda_normal * (1.0 - 2.0 * abs(g - params.g_star) / span)


def glycemic_hour_reward(forecast, params: GlycemicParams) -> float:
    """Sum of point rewards over the 12 forecast values of one decision hour."""
    values = np.asarray(getattr(forecast, "values", forecast), dtype=np.float64)
    if values.shape != (12,):
        raise ValueError(f"forecast has shape {values.shape}, expected (12,)")
    return float(sum(glycemic_point_reward(g, params) for g in values))


@dataclass(frozen=True)
class RewardState:
    """What the behavioral rules are allowed to see: the pre-decision window
    and the type chosen on the previous decision step (None on the first)."""

    window: StateWindow
    prev_action_type: ActionType | None = None


def least_squares_slope(values: np.ndarray, dt: float = TICK_MINUTES) -> float:
    """Slope of an ordinary least-squares line through equally spaced values,
    in units per minute."""
    y = np.asarray(values, dtype=np.float64)
    n = y.size
    x = np.arange(n) * dt
    xc = x - x.mean()
    return float(np.dot(xc, y) / np.dot(xc, xc))


@dataclass(frozen=True)
class RuleSpec:
    """One behavioral rule: an activation predicate and a piecewise-linear
    score f selected by ``kind``, contributing clip(alpha*f, lower, upper)."""

    kind: str
    component: str
    alpha: float
    lower: float
    upper: float
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.component not in COMPONENT_TERM:
            raise ConfigError(f"unknown rule component {self.component!r}")
        if self.kind not in RULE_KINDS:
            raise ConfigError(f"rule kind {self.kind!r} is not defined")
        if not (self.lower <= 0.0 <= self.upper):
            raise ConfigError(
                f"rule {self.kind!r}: bounds [{self.lower}, {self.upper}] "
                "must bracket zero")
        lo, hi = ALPHA_RANGES[self.component]
        if not (lo <= self.alpha <= hi):
            raise ConfigError(
                f"rule {self.kind!r}: alpha={self.alpha} outside the published "
                f"{self.component} range [{lo}, {hi}]")
        object.__setattr__(self, "params", dict(self.params))

    def evaluate(self, state: RewardState, action: BehavioralAction) -> float:
        f = RULE_KINDS[self.kind](state, action, self.params)
        if f is None:
            return 0.0
        return float(np.clip(self.alpha * f, self.lower, self.upper))


def _current_glucose(state: RewardState) -> float:
    return float(state.window.glucose[-1])


def _rule_eat_too_soon(state, action, p):
    """Eating again within `threshold_min` of the last meal; penalty scales
    with how recent the meal was."""
    thr = p.get("threshold_min", 90.0)
    dmeal = float(state.window.minutes_since_meal[-1])
    if action.action_type != ActionType.EAT or dmeal >= thr:
        return None
    return -(thr - dmeal) / thr


def _rule_eat_when_high(state, action, p):
    g = _current_glucose(state)
    thr = p.get("glucose_above", 180.0)
    if action.action_type != ActionType.EAT or g <= thr:
        return None
    return -(g - thr) / p.get("excess_scale", 60.0)


def _rule_eat_rescue_low(state, action, p):
    """Bonus for eating into a low, scaled by the glucose deficit."""
    g = _current_glucose(state)
    thr = p.get("glucose_below", 80.0)
    if action.action_type != ActionType.EAT or g >= thr:
        return None
    return (thr - g) / p.get("deficit_scale", 30.0)


def _rule_inject_stacking(state, action, p):
    """Injecting while the previous bolus is still active."""
    thr = p.get("threshold_min", 120.0)
    dinj = float(state.window.minutes_since_inject[-1])
    if action.action_type != ActionType.INJECT or dinj >= thr:
        return None
    return -(thr - dinj) / thr


def _rule_inject_unsafe(state, action, p):
    """Injecting on low or falling glucose (trend over the last 30 min)."""
    if action.action_type != ActionType.INJECT:
        return None
    g = _current_glucose(state)
    trend = least_squares_slope(state.window.glucose[-6:])
    if g < p.get("glucose_below", 100.0) or trend < p.get("falling_slope", -1.0):
        return -1.0
    return None


def _rule_inject_correction(state, action, p):
    """Bonus for correcting hyperglycemia, scaled by the excess."""
    g = _current_glucose(state)
    thr = p.get("glucose_above", 180.0)
    if action.action_type != ActionType.INJECT or g <= thr:
        return None
    return (g - thr) / p.get("excess_scale", 70.0)


def _rule_sleep_disturb(state, action, p):
    """Any non-NOTHING action during sleep, except a rescue eat on a low."""
    if action.action_type == ActionType.NOTHING:
        return None
    if state.window.sleep[-1] != 1.0:
        return None
    g = _current_glucose(state)
    if action.action_type == ActionType.EAT and g < p.get("rescue_below", 70.0):
        return None
    return -1.0


def _rule_stability_hold(state, action, p):
    """Bonus for doing nothing while the last 6 glucose ticks sit in a
    comfortable band."""
    if action.action_type != ActionType.NOTHING:
        return None
    recent = state.window.glucose[-6:]
    lo, hi = p.get("band_low", 90.0), p.get("band_high", 160.0)
    if ((recent >= lo) & (recent <= hi)).all():
        return 1.0
    return None


def _rule_repeat_type(state, action, p):
    if action.action_type == ActionType.NOTHING:
        return None
    if state.prev_action_type is None or action.action_type != state.prev_action_type:
        return None
    return -1.0


RULE_KINDS: dict[str, Callable] = {
    "eat_too_soon": _rule_eat_too_soon,
    "eat_when_high": _rule_eat_when_high,
    "eat_rescue_low": _rule_eat_rescue_low,
    "inject_stacking": _rule_inject_stacking,
    "inject_unsafe": _rule_inject_unsafe,
    "inject_correction": _rule_inject_correction,
    "sleep_disturb": _rule_sleep_disturb,
    "stability_hold": _rule_stability_hold,
    "repeat_type": _rule_repeat_type,
}


def default_rule_table() -> tuple[RuleSpec, ...]:
    """The shipped rule table.  Coefficients sit inside the published ranges;
    penalties clip to [-alpha, 0] and bonuses to [0, alpha]."""
    def penalty(kind, component, alpha, **params):
        return RuleSpec(kind, component, alpha, -alpha, 0.0, params)

    def bonus(kind, component, alpha, **params):
        return RuleSpec(kind, component, alpha, 0.0, alpha, params)

    return (
        penalty("eat_too_soon", "eat", 150.0, threshold_min=90.0),
        penalty("eat_when_high", "eat", 100.0, glucose_above=180.0, excess_scale=60.0),
        bonus("eat_rescue_low", "eat", 200.0, glucose_below=80.0, deficit_scale=30.0),
        penalty("inject_stacking", "inj", 900.0, threshold_min=120.0),
        penalty("inject_unsafe", "inj", 500.0, glucose_below=100.0, falling_slope=-1.0),
        bonus("inject_correction", "inj", 800.0, glucose_above=180.0, excess_scale=70.0),
        penalty("sleep_disturb", "sleep", 75.0, rescue_below=70.0),
        bonus("stability_hold", "stab", 50.0, band_low=90.0, band_high=160.0),
        penalty("repeat_type", "rep", 1000.0),
    )


def behavioral_reward(state: RewardState, action: BehavioralAction,
                      rules) -> dict[str, float]:
    """Evaluate every rule and sum contributions into the five behavioral
    components.  Inactive rules contribute zero."""
    components = {term: 0.0 for term in ("meal", "insulin", "sleep",
                                         "stability", "repetition")}
    for rule in rules:
        components[COMPONENT_TERM[rule.component]] += rule.evaluate(state, action)
    return components


def total_reward(state: RewardState, action: BehavioralAction, forecast,
                 rules, params: GlycemicParams) -> tuple[float, dict[str, float]]:
    """Scaled step reward plus its six-term breakdown.

    The breakdown (glucose + five behavioral terms) sums to 1000 times the
    scaled value, so it can be reported unscaled without re-deriving.
    """
    breakdown = {"glucose": glycemic_hour_reward(forecast, params)}
    breakdown.update(behavioral_reward(state, action, rules))
    unscaled = sum(breakdown.values())
    return unscaled / SCALE_DIVISOR, breakdown


@dataclass(frozen=True)
class RewardConfig:
    glycemic: GlycemicParams = field(default_factory=GlycemicParams)
    rules: tuple[RuleSpec, ...] = field(default_factory=default_rule_table)


def reward_config_to_dict(config: RewardConfig) -> dict:
    return {
        "glycemic": {
            "t_hypo": config.glycemic.t_hypo,
            "t_hyper": config.glycemic.t_hyper,
            "g_star": config.glycemic.g_star,
            "lambda_hypo": config.glycemic.lambda_hypo,
            "lambda_hyper": config.glycemic.lambda_hyper,
            "lambda_normal": config.glycemic.lambda_normal,
        },
        "rules": [
            {"kind": r.kind, "component": r.component, "alpha": r.alpha,
             "lower": r.lower, "upper": r.upper, "params": dict(r.params)}
            for r in config.rules
        ],
    }


def reward_config_from_dict(d: Mapping) -> RewardConfig:
    try:
        glycemic = GlycemicParams(**d.get("glycemic", {}))
        rules = tuple(
            RuleSpec(r["kind"], r["component"], r["alpha"], r["lower"],
                     r["upper"], r.get("params", {}))
            for r in d.get("rules", [])
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed reward config: {exc}") from exc
    if not rules:
        rules = default_rule_table()
    return RewardConfig(glycemic, rules)


def load_reward_config(path) -> RewardConfig:
    with open(path) as fh:
        return reward_config_from_dict(json.load(fh))


def save_reward_config(config: RewardConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(reward_config_to_dict(config), fh, indent=2)
        fh.write("\n")
