"""Interchange interventions on the causal model and on the network, and the L_INT loss.

For a (base, source) pair and a site module, the high-level target is the
causal model's BG after clamping the aligned variables to their source
values; the network's counterfactual is its prediction on base with the
site module's output patched to its value on source. L_INT is the squared
error between the two (network scale, τ applied to the causal side).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from glucose_iit.cohort import FeatureVector, PatientRecord
from glucose_iit.errors import EmptySiteSet, UnknownModule
from glucose_iit.glucose_model import (
    STATE_VARIABLES,
    ModelVariant,
    build_compressed_scm,
    exogenous_values,
)
from glucose_iit.neural import (
    Architecture,
    ForwardTrace,
    ModuleNetwork,
    _sort_key,
    module_for_variable,
)
from glucose_iit.scm import interchange
from glucose_iit.simulation import ScenarioSettings, simulate_target, trajectory_interchange

logger = logging.getLogger(__name__)

DEFAULT_EXCLUDED_SITES: tuple[str, ...] = ("X7",)


class TrainingMode(str, Enum):
    IIT = "iit"
    STANDARD = "standard"


class LossWeights(BaseModel):
    """Coefficients of the IIT objective; standard training always uses (0, 1)."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    causal: float = Field(default=0.75, ge=0)
    task: float = Field(default=0.25, ge=0)


def loss_coefficients(mode: TrainingMode, weights: LossWeights = LossWeights()) -> tuple[float, float]:
    if mode == TrainingMode.IIT:
        return weights.causal, weights.task
    return 0.0, 1.0


def combined_loss(
    task_mse: float,
    l_int: float,
    mode: TrainingMode,
    weights: LossWeights = LossWeights(),
) -> float:
    """0.75 * L_INT + 0.25 * task MSE for IIT, the task MSE alone for standard training."""
    if task_mse < 0 or l_int < 0:
        raise ValueError("losses must be nonnegative")
    causal, task = loss_coefficients(mode, weights)
    return causal * l_int + task * task_mse


@dataclass(frozen=True)
class TauMap:
    """Maps causal-model BG (mg/dL) onto the network's output scale."""

    scale: float = 0.01

    def __post_init__(self) -> None:
        if not self.scale > 0:
            raise ValueError("tau scale must be positive")

    def __call__(self, bg: float) -> float:
        return self.scale * bg

    def inverse(self, value: float) -> float:
        return value / self.scale


@dataclass(frozen=True)
class AlignmentMap:
    entries: Mapping[str, tuple[str, ...]]
    excluded: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        seen: list[str] = []
        for module, variables in self.entries.items():
            if not variables:
                raise EmptySiteSet(f"module {module} is aligned to no variable")
            seen.extend(variables)
        if sorted(seen) != sorted(STATE_VARIABLES):
            raise ValueError("every causal variable must be aligned to exactly one module")

    @classmethod
    def for_architecture(
        cls, architecture: Architecture, excluded: Iterable[str] = DEFAULT_EXCLUDED_SITES
    ) -> "AlignmentMap":
        """Bijective for tree/parallel; X4_5 and X6_10 carry two variables each for joint."""
        entries: dict[str, list[str]] = {}
        for variable in STATE_VARIABLES:
            entries.setdefault(module_for_variable(variable, architecture), []).append(variable)
        return cls({m: tuple(v) for m, v in entries.items()}, frozenset(excluded))

    def eligible_modules(self) -> list[str]:
        return sorted((m for m in self.entries if m not in self.excluded), key=_sort_key)

    def variables(self, module: str) -> tuple[str, ...]:
        try:
            return self.entries[module]
        except KeyError:
            raise UnknownModule(module) from None


@dataclass(frozen=True)
class Example:
    """A patient with its network input and (optionally) its task target in mg/dL."""

    patient: PatientRecord
    features: FeatureVector
    target_bg: float = math.nan


@dataclass(frozen=True)
class InterventionSample:
    base: Example
    source: Example
    site_module: str
    site_vars: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.site_vars:
            raise EmptySiteSet(f"no variables aligned to {self.site_module}")

    @classmethod
    def create(
        cls, base: Example, source: Example, site_module: str, alignment: AlignmentMap
    ) -> "InterventionSample":
        return cls(base, source, site_module, alignment.variables(site_module))


def site_sampler(alignment: AlignmentMap, rng: np.random.Generator) -> str:
    """Uniform draw over the eligible (non-excluded) modules."""
    eligible = alignment.eligible_modules()
    if not eligible:
        raise EmptySiteSet("alignment has no eligible intervention sites")
    return eligible[int(rng.integers(len(eligible)))]


def counterfactual_target(
    sample: InterventionSample,
    variant: ModelVariant,
    ph: float,
    tau: TauMap,
    settings: ScenarioSettings = ScenarioSettings(),
) -> float:
    """
    τ(BG) of the causal model under the interchange intervention of `sample`.

    amended: interchange on the compressed SCM (both aligned variables
    clamped together for merged modules); regular: trajectory-level
    interchange on the ODE.
    """
    base, source = sample.base.patient, sample.source.patient
    base_scenario = settings.scenario_for(base)
    source_scenario = settings.scenario_for(source)
    sites: str | list[str] = (
        sample.site_vars[0] if len(sample.site_vars) == 1 else list(sample.site_vars)
    )
    if variant == ModelVariant.AMENDED:
        graph = build_compressed_scm(variant, base.constants, base.flux, float(ph))
        source_graph = build_compressed_scm(variant, source.constants, source.flux, float(ph))
        assignment, _ = interchange(
            graph,
            exogenous_values(base.initial_state, base_scenario.cho_dose, base_scenario.bolus_dose, ph),
            exogenous_values(
                source.initial_state, source_scenario.cho_dose, source_scenario.bolus_dose, ph
            ),
            sites,
            source_graph=source_graph,
        )
        bg = assignment["x13"] / base.flux.v_g
    else:
        bg = trajectory_interchange(
            base,
            source,
            base_scenario,
            sites,
            ph,
            settings.dt,
            source_scenario=source_scenario,
            max_magnitude=settings.max_state_magnitude,
        )
    return tau(bg)


class CounterfactualOracle:
    """Caches causal-model targets; they do not depend on the network."""

    def __init__(
        self,
        variant: ModelVariant,
        ph: float,
        tau: TauMap = TauMap(),
        settings: ScenarioSettings = ScenarioSettings(),
    ) -> None:
        self.variant = variant
        self.ph = ph
        self.tau = tau
        self.settings = settings
        self._targets: dict[tuple[str, str, str], float] = {}
        self._factual: dict[str, float] = {}

    def target(self, sample: InterventionSample) -> float:
        key = (sample.base.patient.id, sample.source.patient.id, sample.site_module)
        if key not in self._targets:
            self._targets[key] = counterfactual_target(
                sample, self.variant, self.ph, self.tau, self.settings
            )
        return self._targets[key]

    def factual(self, patient: PatientRecord) -> float:
        if patient.id not in self._factual:
            scenario = self.settings.scenario_for(patient)
            self._factual[patient.id] = self.tau(
                simulate_target(patient, scenario, self.ph, self.variant, self.settings.dt)
            )
        return self._factual[patient.id]


def counterfactual_trace(
    net: ModuleNetwork,
    sample: InterventionSample,
    rng: np.random.Generator | None = None,
    mode: str = "eval",
) -> ForwardTrace:
    """Forward on source to read the site output, then forward on base with it patched in."""
    source_trace = net.forward(sample.source.features, mode, rng=rng)
    value = source_trace.outputs[sample.site_module]
    return net.forward(sample.base.features, mode, {sample.site_module: value}, rng)


def counterfactual_prediction(
    net: ModuleNetwork,
    sample: InterventionSample,
    rng: np.random.Generator | None = None,
    mode: str = "eval",
) -> float:
    return counterfactual_trace(net, sample, rng, mode).prediction


@dataclass
class LintRecord:
    """Per-module squared-error sums and counts of interchange interventions."""

    sse: dict[str, float] = field(default_factory=dict)
    count: dict[str, int] = field(default_factory=dict)

    def add(self, module: str, squared_error: float) -> None:
        self.sse[module] = self.sse.get(module, 0.0) + squared_error
        self.count[module] = self.count.get(module, 0) + 1

    def merge(self, other: "LintRecord") -> None:
        for module, value in other.sse.items():
            self.sse[module] = self.sse.get(module, 0.0) + value
            self.count[module] = self.count.get(module, 0) + other.count[module]

    @property
    def total_sse(self) -> float:
        return float(sum(self.sse.values()))

    @property
    def total_count(self) -> int:
        return int(sum(self.count.values()))

    @property
    def l_int(self) -> float:
        """Mean squared counterfactual error over the accumulated interventions."""
        return self.total_sse / self.total_count if self.total_count else 0.0

    def to_frame(self, tau: TauMap = TauMap(), **columns) -> pd.DataFrame:
        rows = []
        for module in sorted(self.sse, key=_sort_key):
            mse = self.sse[module] / self.count[module]
            rows.append(
                {
                    **columns,
                    "module": module,
                    "sse": self.sse[module],
                    "count": self.count[module],
                    "mse": mse,
                    "rmse": math.sqrt(mse),
                    "rmse_mgdl": tau.inverse(math.sqrt(mse)),
                }
            )
        return pd.DataFrame(rows)


@dataclass(frozen=True)
class Residual:
    sample: InterventionSample
    trace: ForwardTrace
    residual: float


def l_int_step(
    net: ModuleNetwork,
    pairs: Sequence[InterventionSample],
    oracle: CounterfactualOracle,
    rng: np.random.Generator | None = None,
    mode: str = "train",
) -> tuple[LintRecord, list[Residual]]:
    """
    Squared counterfactual error of every pair, attributed to its site module.

    The residuals (prediction − target) come with the patched base trace so
    the caller can backpropagate d(residual²) = 2 · residual.
    """
    if not pairs:
        raise ValueError("l_int_step needs at least one intervention sample")
    record = LintRecord()
    residuals = []
    for sample in pairs:
        trace = counterfactual_trace(net, sample, rng, mode)
        residual = trace.prediction - oracle.target(sample)
        record.add(sample.site_module, residual * residual)
        residuals.append(Residual(sample, trace, residual))
    return record, residuals


def append_lint_log(record: LintRecord, path: str | Path, epoch: int, tau: TauMap) -> None:
    """Append one epoch of per-module L_INT rows (header written on first use)."""
    path = Path(path)
    frame = record.to_frame(tau, epoch=epoch)
    frame.to_csv(path, mode="a", header=not path.exists(), index=False)
