"""Fixed-step Euler integration of the glucose-insulin system.

Produces ground-truth BG targets, the pre-meal CGM history that feeds the
network, and trajectory-level interchange counterfactuals for the regular
(cyclic) model.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from glucose_iit.errors import NonFiniteValue, StepTooLarge, UnknownVariable
from glucose_iit.glucose_model import (
    STATE_VARIABLES,
    ModelVariant,
    build_compressed_scm,
    exogenous_values,
    rate_function,
)
from glucose_iit.scm import Intervention, evaluate

if TYPE_CHECKING:
    from glucose_iit.cohort import PatientRecord

logger = logging.getLogger(__name__)

PREDICTION_HORIZONS: tuple[int, ...] = (30, 45, 60, 120)
CGM_READINGS = 9
PMOL_PER_UNIT = 6000.0


class Scenario(BaseModel):
    """One meal with its bolus; times in minutes, CHO in mg, bolus in pmol/kg."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    meal_time: float = Field(default=40.0, ge=0)
    cho_dose: float = Field(default=45_000.0, ge=0)
    bolus_dose: float = Field(default=0.0, ge=0)
    pre_meal_minutes: float = Field(default=40.0, ge=0)
    sampling_interval: float = Field(default=5.0, ge=0)

    @model_validator(mode="after")
    def _pre_meal_window(self) -> "Scenario":
        if self.pre_meal_minutes < (CGM_READINGS - 1) * self.sampling_interval:
            raise ValueError("pre_meal_minutes must cover 8 sampling intervals")
        if self.meal_time < self.pre_meal_minutes:
            raise ValueError("meal_time must leave room for the pre-meal window")
        return self


class ScenarioSettings(BaseModel):
    """Run-level meal protocol; per-patient doses are derived from body weight."""

    model_config = ConfigDict(extra="forbid")

    meal_time: float = Field(default=40.0, ge=0)
    cho_grams: float = Field(default=45.0, ge=0)
    insulin_to_carb_ratio: float = Field(default=15.0, gt=0, description="grams per unit")
    pre_meal_minutes: float = Field(default=40.0, ge=0)
    sampling_interval: float = Field(default=5.0, ge=0)
    dt: float = Field(default=1.0, gt=0)
    max_state_magnitude: float = Field(default=1e9, gt=0)

    def scenario_for(self, patient: "PatientRecord") -> Scenario:
        units = self.cho_grams / self.insulin_to_carb_ratio
        return Scenario(
            meal_time=self.meal_time,
            cho_dose=self.cho_grams * 1000.0,
            bolus_dose=units * PMOL_PER_UNIT / patient.flux.body_weight,
            pre_meal_minutes=self.pre_meal_minutes,
            sampling_interval=self.sampling_interval,
        )


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    bg: np.ndarray

    def at(self, minute: float) -> int:
        """Index of the grid point at `minute`."""
        index = int(np.searchsorted(self.times, minute - 1e-9))
        if index >= len(self.times) or not math.isclose(self.times[index], minute, abs_tol=1e-6):
            raise ValueError(f"Minute {minute} is not on the integration grid")
        return index

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.states, columns=list(STATE_VARIABLES))
        frame.insert(0, "time", self.times)
        frame["bg"] = self.bg
        return frame

    def to_csv(self, path: str | Path) -> None:
        self.to_frame().to_csv(path, index=False)


def _grid_steps(span: float, dt: float) -> int:
    steps = int(round(span / dt))
    if not math.isclose(steps * dt, span, rel_tol=1e-9, abs_tol=1e-9):
        raise ValueError(f"{span} minutes is not a multiple of dt={dt}")
    return steps


def integrate(
    patient: "PatientRecord",
    scenario: Scenario,
    dt: float,
    end: float,
    clamp: Intervention | None = None,
    *,
    clamp_from: float = 0.0,
    clamp_schedule: Mapping[str, np.ndarray] | None = None,
    variant: ModelVariant = ModelVariant.REGULAR,
    max_magnitude: float = 1e9,
) -> Trajectory:
    """
    Explicit Euler on the rate equations from t=0 to `end`.

    The meal and bolus arrive as impulses over the step that starts at
    `scenario.meal_time` (dose / dt). After every step states are floored at
    zero, then interventions are applied to grid points at or after
    `clamp_from`: `clamp` fixes components to constants, `clamp_schedule`
    overwrites them with a per-grid-point series (same grid, same length).

    Raises:
        ValueError: If dt is not positive or `end`/meal time are off the grid.
        UnknownVariable: If an intervention names something other than x1..x13.
        NonFiniteValue: With the step index where the state stopped being finite.
        StepTooLarge: If any component exceeds `max_magnitude`.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    n_steps = _grid_steps(end, dt)
    meal_step = _grid_steps(scenario.meal_time, dt)
    rates = rate_function(patient.constants, patient.flux, variant)

    fixed = dict(clamp.clamps) if clamp is not None else {}
    schedule = dict(clamp_schedule or {})
    for name in list(fixed) + list(schedule):
        if name not in STATE_VARIABLES:
            raise UnknownVariable(name)
    fixed_idx = [(STATE_VARIABLES.index(n), float(v)) for n, v in fixed.items()]
    sched_idx = [(STATE_VARIABLES.index(n), np.asarray(s, float)) for n, s in schedule.items()]

    def intervene(state: np.ndarray, step: int) -> None:
        if step * dt + 1e-9 < clamp_from:
            return
        for position, value in fixed_idx:
            state[position] = value
        for position, series in sched_idx:
            state[position] = series[step]

    times = np.arange(n_steps + 1) * dt
    states = np.empty((n_steps + 1, len(STATE_VARIABLES)))
    x = patient.initial_state.as_array()
    intervene(x, 0)
    states[0] = x
    for step in range(n_steps):
        cho = scenario.cho_dose / dt if step == meal_step else 0.0
        insulin = scenario.bolus_dose / dt if step == meal_step else 0.0
        x = x + dt * rates(x, cho, insulin)
        np.maximum(x, 0.0, out=x)
        intervene(x, step + 1)
        if not np.all(np.isfinite(x)):
            raise NonFiniteValue(step + 1)
        peak = float(np.max(np.abs(x)))
        if peak > max_magnitude:
            raise StepTooLarge(step + 1, peak)
        states[step + 1] = x
    bg = states[:, STATE_VARIABLES.index("x13")] / patient.flux.v_g
    return Trajectory(times=times, states=states, bg=bg)


def target_bg(
    patient: "PatientRecord",
    scenario: Scenario,
    ph: float,
    dt: float = 1.0,
    *,
    max_magnitude: float = 1e9,
) -> float:
    """BG (mg/dL) `ph` minutes after the meal, from an unclamped run."""
    end = scenario.meal_time + ph
    trajectory = integrate(patient, scenario, dt, end, max_magnitude=max_magnitude)
    return float(trajectory.bg[trajectory.at(end)])


def cgm_history(
    patient: "PatientRecord", scenario: Scenario, dt: float = 1.0
) -> np.ndarray:
    """Nine pre-meal BG readings, the last one taken at meal time."""
    trajectory = integrate(patient, scenario, dt, scenario.meal_time)
    minutes = [
        scenario.meal_time - k * scenario.sampling_interval
        for k in range(CGM_READINGS - 1, -1, -1)
    ]
    return np.array([trajectory.bg[trajectory.at(m)] for m in minutes])


def trajectory_interchange(
    patient_base: "PatientRecord",
    patient_source: "PatientRecord",
    scenario: Scenario,
    site: str | Sequence[str],
    ph: float,
    dt: float = 1.0,
    *,
    source_scenario: Scenario | None = None,
    max_magnitude: float = 1e9,
) -> float:
    """
    Counterfactual BG for the regular model.

    The source runs unclamped; its post-meal trajectory of every site
    component is then written into the base run grid point by grid point,
    starting at meal time. Several sites are clamped jointly from the same
    source run.
    """
    sites = [site] if isinstance(site, str) else list(site)
    source_scenario = source_scenario or scenario
    if not math.isclose(source_scenario.meal_time, scenario.meal_time):
        raise ValueError("base and source must share the meal time")
    end = scenario.meal_time + ph
    source = integrate(patient_source, source_scenario, dt, end, max_magnitude=max_magnitude)
    schedule = {name: source.states[:, STATE_VARIABLES.index(name)] for name in sites}
    counterfactual = integrate(
        patient_base,
        scenario,
        dt,
        end,
        clamp_from=scenario.meal_time,
        clamp_schedule=schedule,
        max_magnitude=max_magnitude,
    )
    return float(counterfactual.bg[counterfactual.at(end)])


def compressed_target_bg(patient: "PatientRecord", scenario: Scenario, ph: float) -> float:
    """Factual BG of the amended compressed SCM at horizon `ph`."""
    graph = build_compressed_scm(ModelVariant.AMENDED, patient.constants, patient.flux, float(ph))
    inputs = exogenous_values(patient.initial_state, scenario.cho_dose, scenario.bolus_dose, ph)
    values = evaluate(graph, inputs)
    bg = values["x13"] / patient.flux.v_g
    if not math.isfinite(bg):
        raise NonFiniteValue("bg")
    return bg


def simulate_target(
    patient: "PatientRecord",
    scenario: Scenario,
    ph: float,
    variant: ModelVariant,
    dt: float = 1.0,
) -> float:
    """Task target for a run: the ODE for the regular model, the compressed SCM for the amended one."""
    if variant == ModelVariant.AMENDED:
        return compressed_target_bg(patient, scenario, ph)
    return target_bg(patient, scenario, ph, dt)
