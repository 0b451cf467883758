"""Meal/insulin schedules and the transformations used by the replay settings.

A Scenario is a value object: a horizon, a constant basal rate and sorted
meal/bolus event lists. `rasterize` turns it into per-minute input signals
with the gram/unit conversions done in one place:

    CHO raster     grams * 1000 / BW / duration   -> mg/(kg*min)
    bolus raster   dose * 1e6 / BW / dt           -> uU/(kg*min) for one step
    basal          already uU/(kg*min)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .errors import ValidationError

MINUTES_PER_DAY = 1440.0


@dataclass(frozen=True)
class MealEvent:
    t_min: float          # minutes from scenario start
    grams: float          # g CHO
    duration_min: float = 15.0

    def __post_init__(self) -> None:
        if self.grams <= 0.0:
            raise ValidationError(f"meal grams must be > 0, got {self.grams}")
        if self.duration_min <= 0.0:
            raise ValidationError("meal duration must be > 0")
        if self.t_min < 0.0:
            raise ValidationError("meal time must be >= 0")


@dataclass(frozen=True)
class BolusEvent:
    t_min: float   # minutes from scenario start
    dose: float    # insulin units

    def __post_init__(self) -> None:
        if self.dose <= 0.0:
            raise ValidationError(f"bolus dose must be > 0, got {self.dose}")
        if self.t_min < 0.0:
            raise ValidationError("bolus time must be >= 0")


@dataclass(frozen=True)
class Scenario:
    horizon_min: float
    basal_rate: float                      # uU/(kg*min)
    meals: tuple[MealEvent, ...] = ()
    boluses: tuple[BolusEvent, ...] = ()

    def __post_init__(self) -> None:
        if self.horizon_min <= 0 or self.horizon_min % 5 != 0:
            raise ValidationError("horizon must be a positive multiple of 5 min")
        if self.basal_rate < 0:
            raise ValidationError("basal rate must be >= 0")
        meals = tuple(sorted(self.meals, key=lambda m: m.t_min))
        boluses = tuple(sorted(self.boluses, key=lambda b: b.t_min))
        object.__setattr__(self, "meals", meals)
        object.__setattr__(self, "boluses", boluses)
        for m in meals:
            if m.t_min + m.duration_min > self.horizon_min:
                raise ValidationError(
                    f"meal at t={m.t_min} extends past the horizon {self.horizon_min}")
        for b in boluses:
            if b.t_min >= self.horizon_min:
                raise ValidationError(f"bolus at t={b.t_min} is outside the horizon")

    def to_dict(self) -> dict:
        return {
            "horizon_min": self.horizon_min,
            "basal_rate": self.basal_rate,
            "meals": [{"t_min": m.t_min, "grams": m.grams, "duration_min": m.duration_min}
                      for m in self.meals],
            "boluses": [{"t_min": b.t_min, "dose": b.dose} for b in self.boluses],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        try:
            meals = tuple(MealEvent(float(m["t_min"]), float(m["grams"]),
                                    float(m.get("duration_min", 15.0)))
                          for m in d.get("meals", []))
            boluses = tuple(BolusEvent(float(b["t_min"]), float(b["dose"]))
                            for b in d.get("boluses", []))
            return cls(horizon_min=float(d["horizon_min"]),
                       basal_rate=float(d["basal_rate"]),
                       meals=meals, boluses=boluses)
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed scenario: {exc}") from exc

    @classmethod
    def from_json(cls, path) -> "Scenario":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_json(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


@dataclass
class RasterizedInputs:
    """Piecewise-constant input signals on the dt grid.

    `cho[k]` and `insulin[k]` hold the rates over [t_k, t_k + dt) where
    t_k = (k - n_pre) * dt; the first `n_pre` entries are the pre-roll
    segment (basal insulin only) needed to feed the insulin delay.
    """

    dt: float
    n_pre: int
    cho: np.ndarray        # mg/(kg*min)
    insulin: np.ndarray    # uU/(kg*min)

    @property
    def n_steps(self) -> int:
        return self.cho.size - self.n_pre


def rasterize(s: Scenario, dt: float = 1.0, pre_roll_min: float = 60.0,
              bw_kg: float = 70.0) -> RasterizedInputs:
    """Expand a scenario into per-step CHO and insulin rates.

    Meal grams are spread uniformly over the meal duration; a bolus is
    delivered within a single step. The discretization conserves mass
    exactly: sum(raster) * dt equals the unit-converted event totals.
    """
    if dt <= 0:
        raise ValidationError("dt must be > 0")
    for q, what in ((s.horizon_min, "horizon"), (pre_roll_min, "pre-roll")):
        if abs(q / dt - round(q / dt)) > 1e-9:
            raise ValidationError(f"{what} must be a multiple of dt")
    n_pre = int(round(pre_roll_min / dt))
    n_steps = int(round(s.horizon_min / dt))
    cho = np.zeros(n_pre + n_steps)
    insulin = np.full(n_pre + n_steps, float(s.basal_rate))

    def step_of(t_min: float, what: str) -> int:
        k = t_min / dt
        if abs(k - round(k)) > 1e-9:
            raise ValidationError(f"{what} time {t_min} min is not on the dt={dt} grid")
        return int(round(k))

    for m in s.meals:
        k0 = step_of(m.t_min, "meal")
        dur = step_of(m.duration_min, "meal duration")
        rate = m.grams * 1000.0 / bw_kg / m.duration_min
        cho[n_pre + k0:n_pre + k0 + dur] += rate
    for b in s.boluses:
        k0 = step_of(b.t_min, "bolus")
        insulin[n_pre + k0] += b.dose * 1e6 / bw_kg / dt
    return RasterizedInputs(dt=dt, n_pre=n_pre, cho=cho, insulin=insulin)


def extend_next_day(s: Scenario) -> Scenario:
    """Append a full next day: events repeat 24 h later, horizon grows by 24 h."""
    shift = MINUTES_PER_DAY
    meals = s.meals + tuple(replace(m, t_min=m.t_min + shift) for m in s.meals)
    boluses = s.boluses + tuple(replace(b, t_min=b.t_min + shift) for b in s.boluses)
    return Scenario(horizon_min=s.horizon_min + shift, basal_rate=s.basal_rate,
                    meals=meals, boluses=boluses)


def tile_scenario(s: Scenario, repeats: int = 2) -> Scenario:
    """Play the scenario back-to-back `repeats` times (shift = horizon)."""
    if repeats < 1:
        raise ValidationError("repeats must be >= 1")
    meals = tuple(replace(m, t_min=m.t_min + r * s.horizon_min)
                  for r in range(repeats) for m in s.meals)
    boluses = tuple(replace(b, t_min=b.t_min + r * s.horizon_min)
                    for r in range(repeats) for b in s.boluses)
    return Scenario(horizon_min=s.horizon_min * repeats, basal_rate=s.basal_rate,
                    meals=meals, boluses=boluses)


@dataclass(frozen=True)
class MealPerturbation:
    """Per-meal gram scaling and time shifts, applied in meal order.

    Lists shorter than the meal count are cycled. Boluses are left unchanged
    unless `scale_boluses` is set, in which case doses follow the gram scale.
    """

    gram_scales: tuple[float, ...] = (0.5, 1.5)
    time_shifts_min: tuple[float, ...] = (30.0, -30.0)
    scale_boluses: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "MealPerturbation":
        return cls(gram_scales=tuple(float(x) for x in d.get("gram_scales", (0.5, 1.5))),
                   time_shifts_min=tuple(float(x) for x in d.get("time_shifts_min", (30.0, -30.0))),
                   scale_boluses=bool(d.get("scale_boluses", False)))


DEFAULT_PERTURBATION = MealPerturbation()


def alter_meals(s: Scenario, spec: MealPerturbation = DEFAULT_PERTURBATION) -> Scenario:
    """Apply the configured gram scalings and time shifts to the meal train."""
    if not s.meals:
        return s
    scales = spec.gram_scales or (1.0,)
    shifts = spec.time_shifts_min or (0.0,)
    meals = []
    for i, m in enumerate(s.meals):
        scale = scales[i % len(scales)]
        shift = shifts[i % len(shifts)]
        meals.append(MealEvent(t_min=m.t_min + shift, grams=m.grams * scale,
                               duration_min=m.duration_min))
    boluses = s.boluses
    if spec.scale_boluses:
        boluses = tuple(replace(b, dose=b.dose * scales[i % len(scales)])
                        for i, b in enumerate(s.boluses))
    return Scenario(horizon_min=s.horizon_min, basal_rate=s.basal_rate,
                    meals=tuple(meals), boluses=boluses)


def canonical_scenario() -> Scenario:
    """The fixed daily profile every experiment references.

    Three meals (50 g at 07:00, 70 g at 12:30, 80 g at 19:00, eaten over
    15 min) with boluses at meal times using a 10 g/U carb ratio, constant
    basal, 22 h horizon starting at midnight.
    """
    meals = (MealEvent(420.0, 50.0, 15.0),
             MealEvent(750.0, 70.0, 15.0),
             MealEvent(1140.0, 80.0, 15.0))
    boluses = (BolusEvent(420.0, 5.0),
               BolusEvent(750.0, 7.0),
               BolusEvent(1140.0, 8.0))
    return Scenario(horizon_min=1320.0, basal_rate=190.0, meals=meals, boluses=boluses)
