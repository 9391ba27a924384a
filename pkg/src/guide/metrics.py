"""Outcome metrics, behavioral profiles, similarity scores, and the
nonparametric comparison machinery (Wilcoxon signed-rank with Holm step-down
adjustment)."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class MetricError(ValueError):
    pass


class DegenerateSampleError(MetricError):
    """All paired differences are zero; the test statistic is undefined."""


# --- glycemic outcomes -------------------------------------------------------

TIR_LOW = 70.0
TIR_HIGH = 180.0


@dataclass(frozen=True)
class GlycemicSummary:
    tir_pct: float
    tar_pct: float
    tbr_pct: float
    cv_pct: float

    def as_dict(self) -> dict:
        return {"tir_pct": self.tir_pct, "tar_pct": self.tar_pct,
                "tbr_pct": self.tbr_pct, "cv_pct": self.cv_pct}


def glycemic_summary(glucose) -> GlycemicSummary:
    """Time-in-range partition and coefficient of variation.

    TIR counts 70..180 inclusive, TBR strictly below 70, TAR strictly above
    180; the three always sum to 100.  CV is 100*sd/mean with population sd.
    """
    g = np.asarray(glucose, dtype=np.float64)
    if g.size == 0:
        raise MetricError("empty glucose series")
    if (g <= 0).any() or not np.isfinite(g).all():
        raise MetricError("glucose series must be positive and finite")
    n = g.size
    tbr = 100.0 * np.count_nonzero(g < TIR_LOW) / n
    tar = 100.0 * np.count_nonzero(g > TIR_HIGH) / n
    tir = 100.0 * np.count_nonzero((g >= TIR_LOW) & (g <= TIR_HIGH)) / n
    cv = 100.0 * g.std() / g.mean()
    return GlycemicSummary(tir, tar, tbr, cv)


# --- behavioral profiles -----------------------------------------------------

PROFILE_FIELDS = ("meal_freq", "avg_carbs", "bolus_freq", "avg_bolus",
                  "meal_gap", "bolus_gap")


@dataclass(frozen=True)
class BehavioralProfile:
    """Six summary numbers describing eating/dosing behavior: events per day,
    average magnitudes, and mean gap (hours) between same-kind events.  When a
    kind has fewer than two events its gap falls back to the observation
    horizon in hours."""

    meal_freq: float
    avg_carbs: float
    bolus_freq: float
    avg_bolus: float
    meal_gap: float
    bolus_gap: float

    def as_vector(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in PROFILE_FIELDS])

    def as_dict(self) -> dict:
        return {f: getattr(self, f) for f in PROFILE_FIELDS}


@dataclass(frozen=True)
class ProfileEvent:
    """One consumption or dosing event on the absolute episode clock."""

    kind: str          # "carb" or "bolus"
    time_hours: float
    magnitude: float


def behavioral_profile(events: Iterable[ProfileEvent], days: float) -> BehavioralProfile:
    if days <= 0:
        raise MetricError(f"days must be positive, got {days}")
    horizon_hours = 24.0 * days
    by_kind: dict[str, list[ProfileEvent]] = {"carb": [], "bolus": []}
    for ev in events:
        if ev.kind not in by_kind:
            raise MetricError(f"unknown event kind {ev.kind!r}")
        if ev.magnitude < 0:
            raise MetricError(f"negative magnitude {ev.magnitude} at {ev.time_hours} h")
        by_kind[ev.kind].append(ev)

    def stats(kind):
        evs = sorted(by_kind[kind], key=lambda e: e.time_hours)
        freq = len(evs) / days
        avg = float(np.mean([e.magnitude for e in evs])) if evs else 0.0
        if len(evs) >= 2:
            gaps = np.diff([e.time_hours for e in evs])
            gap = float(gaps.mean())
        else:
            gap = horizon_hours
        return freq, avg, gap

    meal_freq, avg_carbs, meal_gap = stats("carb")
    bolus_freq, avg_bolus, bolus_gap = stats("bolus")
    return BehavioralProfile(meal_freq, avg_carbs, bolus_freq, avg_bolus,
                             meal_gap, bolus_gap)


def mean_profile(profiles: Sequence[BehavioralProfile]) -> BehavioralProfile:
    """Average profiles elementwise; used to pool rollouts across initial
    states and seeds."""
    if not profiles:
        raise MetricError("no profiles to average")
    mat = np.stack([p.as_vector() for p in profiles])
    return BehavioralProfile(*mat.mean(axis=0))


# --- similarity scores -------------------------------------------------------

def cosine_similarity(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch {x.shape} vs {y.shape}")
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        raise MetricError("cosine similarity undefined for a zero vector")
    return float(np.dot(x, y) / (nx * ny))


def mrd(x, y) -> float:
    """Mean relative deviation of x against reference y, elementwise.
    A zero reference component is a hard error so exclusions surface loudly
    instead of silently skewing the mean."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch {x.shape} vs {y.shape}")
    if (y == 0.0).any():
        k = int(np.argmax(y == 0.0))
        raise MetricError(f"reference component {k} is zero")
    return float(np.mean(np.abs((x - y) / y)))


def pnd(x, y) -> float:
    """Normalized total deviation: l1 distance over the reference's l1 norm."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch {x.shape} vs {y.shape}")
    denom = np.abs(y).sum()
    if denom == 0.0:
        raise MetricError("reference vector has zero l1 norm")
    return float(np.abs(x - y).sum() / denom)


# --- Wilcoxon signed-rank ----------------------------------------------------

EXACT_MAX_N = 12


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float     # W+ = sum of ranks of positive differences
    p_value: float
    n_used: int          # pairs remaining after dropping zero differences
    method: str          # "exact" or "normal"


def _rank_with_ties(values: np.ndarray) -> np.ndarray:
    """Average ranks (1-based) with ties sharing the mean of their span."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_signed_rank_counts(n: int) -> np.ndarray:
    """Number of sign patterns achieving each W+ value for integer ranks
    1..n: coefficients of prod_r (1 + z^r)."""
    max_w = n * (n + 1) // 2
    counts = np.zeros(max_w + 1, dtype=np.int64)
    counts[0] = 1
    for r in range(1, n + 1):
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:-r] if r > 0 else counts
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(x, y, alternative: str = "two-sided") -> WilcoxonResult:
    """Paired signed-rank test of x against y.

    Zero differences are dropped.  With n <= 12 remaining pairs and all
    difference magnitudes distinct, the p-value comes from exact enumeration
    of the 2^n sign assignments; otherwise a normal approximation with
    average ranks, tie-corrected variance, and a 0.5 continuity correction.
    ``alternative`` is "two-sided" or "greater" (x tends to exceed y).
    """
    if alternative not in ("two-sided", "greater"):
        raise MetricError(f"unknown alternative {alternative!r}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise MetricError("need two equal-length 1-d samples")
    d = x - y
    d = d[d != 0.0]
    if d.size == 0:
        raise DegenerateSampleError("all paired differences are zero")
    n = d.size
    if n < 5:
        raise MetricError(f"only {n} nonzero differences; need at least 5")
    magnitudes = np.abs(d)
    ranks = _rank_with_ties(magnitudes)
    w_plus = float(ranks[d > 0].sum())
    max_w = n * (n + 1) / 2.0

    distinct = np.unique(magnitudes).size == n
    if n <= EXACT_MAX_N and distinct:
        counts = _exact_signed_rank_counts(n)
        total = float(2 ** n)
        w = int(round(w_plus))
        if alternative == "greater":
            p = counts[w:].sum() / total
        else:
            lower = counts[:min(w, int(max_w) - w) + 1].sum()
            upper = counts[max(w, int(max_w) - w):].sum()
            p = (lower + upper) / total
        return WilcoxonResult(w_plus, min(1.0, float(p)), n, "exact")

    mean = n * (n + 1) / 4.0
    tie_term = 0.0
    _, tie_counts = np.unique(magnitudes, return_counts=True)
    for t in tie_counts:
        tie_term += t ** 3 - t
    var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term / 48.0
    if var <= 0:
        raise DegenerateSampleError("zero variance after tie correction")
    sd = math.sqrt(var)
    if alternative == "greater":
        z = (w_plus - mean - 0.5) / sd
        p = 0.5 * math.erfc(z / math.sqrt(2.0))
    else:
        z = (abs(w_plus - mean) - 0.5) / sd
        p = math.erfc(z / math.sqrt(2.0))
    return WilcoxonResult(w_plus, min(1.0, float(p)), n, "normal")


def holm_bonferroni(raw_p) -> np.ndarray:
    """Step-down familywise adjustment: sort ascending, take the running max
    of (m-j)*p_(j) capped at 1, and map back to the input order."""
    p = np.asarray(raw_p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise MetricError("need a nonempty 1-d array of p-values")
    if ((p < 0) | (p > 1)).any():
        k = int(np.argmax((p < 0) | (p > 1)))
        raise MetricError(f"p[{k}]={p[k]} outside [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    adjusted = np.empty(m, dtype=np.float64)
    running = 0.0
    for j, idx in enumerate(order):
        running = max(running, (m - j) * p[idx])
        adjusted[idx] = min(1.0, running)
    return adjusted
