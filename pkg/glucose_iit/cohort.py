"""Virtual-patient cohort: sampling, feature assembly and dataset splits."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, model_validator

from glucose_iit.errors import MissingDistributionEntry, ResamplingExhausted, WrongCohortSize, ZeroVariance
from glucose_iit.glucose_model import FluxParameters, KineticConstants, PatientState
from glucose_iit.simulation import CGM_READINGS, PMOL_PER_UNIT, Scenario

logger = logging.getLogger(__name__)

# Sampled initial-state entries; x1, x2, x3 and x7 start at zero for every patient.
STATE_FEATURES: tuple[str, ...] = ("x4", "x5", "x6", "x8", "x9", "x10", "x11", "x12", "x13")
ZERO_AT_START: tuple[str, ...] = ("x1", "x2", "x3", "x7")
FEATURE_NAMES: tuple[str, ...] = (
    tuple(f"z_{name}" for name in STATE_FEATURES)
    + tuple(f"cgm_{k}" for k in range(CGM_READINGS))
    + ("cho_grams", "bolus_units")
)
CGM_SCALE = 100.0


class AgeGroup(str, Enum):
    CHILD = "child"
    ADOLESCENT = "adolescent"
    ADULT = "adult"

    @property
    def age_range(self) -> tuple[int, int]:
        return {
            AgeGroup.CHILD: (0, 13),
            AgeGroup.ADOLESCENT: (14, 20),
            AgeGroup.ADULT: (21, 100),
        }[self]


def group_for_age(age: float) -> AgeGroup:
    if age <= 13:
        return AgeGroup.CHILD
    if age <= 20:
        return AgeGroup.ADOLESCENT
    return AgeGroup.ADULT


class Gaussian(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    mean: float
    sd: float = Field(ge=0)


class DistributionTable(BaseModel):
    """Per-parameter, per-age-group Gaussian (mean, SD) of the initial state."""

    model_config = ConfigDict(extra="forbid")

    entries: dict[str, dict[AgeGroup, Gaussian]]

    def get(self, parameter: str, group: AgeGroup) -> Gaussian:
        try:
            return self.entries[parameter][group]
        except KeyError:
            raise MissingDistributionEntry(parameter, group.value) from None


def _table(rows: Mapping[str, tuple[float, float, float, float, float, float]]) -> DistributionTable:
    groups = (AgeGroup.CHILD, AgeGroup.ADOLESCENT, AgeGroup.ADULT)
    return DistributionTable(
        entries={
            name: {g: Gaussian(mean=row[2 * i], sd=row[2 * i + 1]) for i, g in enumerate(groups)}
            for name, row in rows.items()
        }
    )


# child mean, SD, adolescent mean, SD, adult mean, SD
DEFAULT_DISTRIBUTION = _table(
    {
        "x4": (260.42, 25.16, 282.12, 26.33, 258.58, 12.90),
        "x5": (95.66, 35.97, 371.76, 17.92, 194.25, 29.02),
        "x6": (5.60, 1.23, 5.08, 1.58, 5.94, 1.25),
        "x8": (106.72, 11.31, 109.18, 8.82, 105.03, 16.71),
        "x9": (106.72, 11.31, 109.18, 8.82, 105.03, 16.71),
        "x10": (2.92, 1.30, 3.44, 1.10, 3.50, 1.19),
        "x11": (67.33, 15.78, 67.87, 9.30, 87.84, 33.76),
        "x12": (60.43, 22.37, 66.62, 24.62, 112.09, 30.73),
        "x13": (260.42, 25.16, 282.11, 26.33, 258.58, 12.90),
    }
)

DEFAULT_COUNTS: Mapping[AgeGroup, int] = {
    AgeGroup.CHILD: 7,
    AgeGroup.ADOLESCENT: 10,
    AgeGroup.ADULT: 183,
}


class GroupParameters(BaseModel):
    """Kinetic constants and flux parameters shared by every patient of a group."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    constants: KineticConstants
    flux: FluxParameters


_SHARED_CONSTANTS = dict(
    k_max=0.0465, k_gut=0.02, k_abs=0.057, k_p2u=0.0331, k_i=0.0079, k_d=0.0164,
    k_1=0.065, k_m1=0.19, k_m2=0.484, k_m3=0.285, k_m4=0.194,
    k_a1=0.0018, k_a2=0.0182, k_sc=0.0766,
)

# Chosen so the group's mean initial state sits close to a pre-meal steady state.
DEFAULT_GROUP_PARAMETERS: Mapping[AgeGroup, GroupParameters] = {
    AgeGroup.CHILD: GroupParameters(
        constants=KineticConstants(**_SHARED_CONSTANTS, k_2=0.1619, k_Ib=106.72),
        flux=FluxParameters(kp1=3.95, body_weight=35.0, vm0=4.84, v_i=0.0525),
    ),
    AgeGroup.ADOLESCENT: GroupParameters(
        constants=KineticConstants(**_SHARED_CONSTANTS, k_2=0.04563, k_Ib=109.18),
        flux=FluxParameters(kp1=3.95, body_weight=50.0, vm0=2.21, v_i=0.04653),
    ),
    AgeGroup.ADULT: GroupParameters(
        constants=KineticConstants(**_SHARED_CONSTANTS, k_2=0.079, k_Ib=105.03),
        flux=FluxParameters(kp1=3.95, body_weight=78.0, vm0=3.15, v_i=0.0566),
    ),
}


class PatientRecord(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    id: str
    age: float = Field(ge=0, le=100)
    group: AgeGroup
    initial_state: PatientState
    constants: KineticConstants
    flux: FluxParameters

    @model_validator(mode="after")
    def _consistent(self) -> "PatientRecord":
        if group_for_age(self.age) != self.group:
            raise ValueError(f"age {self.age} does not belong to group {self.group.value}")
        for name in ZERO_AT_START:
            if getattr(self.initial_state, name) != 0.0:
                raise ValueError(f"{name} must start at 0")
        return self


_PATIENTS = TypeAdapter(list[PatientRecord])


@dataclass(frozen=True)
class FeatureVector:
    """The 20 network inputs, ordered as FEATURE_NAMES."""

    values: np.ndarray

    def __post_init__(self) -> None:
        if self.values.shape != (len(FEATURE_NAMES),) or not np.all(np.isfinite(self.values)):
            raise ValueError("feature vector must hold 20 finite values")


class StandardizationStats(BaseModel):
    """Training-split mean and (population) SD of each state feature."""

    model_config = ConfigDict(extra="forbid")

    mean: dict[str, float]
    sd: dict[str, float]

    @classmethod
    def from_patients(cls, patients: Sequence[PatientRecord]) -> "StandardizationStats":
        matrix = np.array(
            [[getattr(p.initial_state, n) for n in STATE_FEATURES] for p in patients], float
        )
        return cls(
            mean={n: float(v) for n, v in zip(STATE_FEATURES, matrix.mean(axis=0))},
            sd={n: float(v) for n, v in zip(STATE_FEATURES, matrix.std(axis=0))},
        )

    def standardize(self, parameter: str, value: float) -> float:
        sd = self.sd[parameter]
        if sd == 0:
            raise ZeroVariance(parameter)
        return (value - self.mean[parameter]) / sd

    def destandardize(self, parameter: str, z: float) -> float:
        return self.mean[parameter] + z * self.sd[parameter]


def sample_cohort(
    table: DistributionTable,
    counts: Mapping[AgeGroup, int],
    rng_seed: int,
    group_parameters: Mapping[AgeGroup, GroupParameters] = DEFAULT_GROUP_PARAMETERS,
    *,
    max_attempts: int = 1000,
) -> list[PatientRecord]:
    """
    Draw patients group by group (child, adolescent, adult).

    Ages are uniform integers inside the group's range. Each state parameter
    comes from its group's Gaussian, independently, with negative draws
    redrawn up to `max_attempts` times.

    Raises:
        MissingDistributionEntry: If the table lacks a (parameter, group) cell.
        ResamplingExhausted: If a parameter keeps drawing negative values.
    """
    rng = np.random.default_rng(rng_seed)
    patients: list[PatientRecord] = []
    for group in AgeGroup:
        n = int(counts.get(group, 0))
        if n <= 0:
            continue
        low, high = group.age_range
        ages = rng.integers(low, high + 1, size=n)
        draws: dict[str, np.ndarray] = {}
        for name in STATE_FEATURES:
            gaussian = table.get(name, group)
            values = rng.normal(gaussian.mean, gaussian.sd, size=n)
            for _ in range(max_attempts):
                negative = values < 0
                if not negative.any():
                    break
                values[negative] = rng.normal(gaussian.mean, gaussian.sd, size=int(negative.sum()))
            else:
                raise ResamplingExhausted(name, group.value, max_attempts)
            draws[name] = values
        params = group_parameters[group]
        for i in range(n):
            state = PatientState(**{name: float(draws[name][i]) for name in STATE_FEATURES})
            patients.append(
                PatientRecord(
                    id=f"p{len(patients):04d}",
                    age=float(ages[i]),
                    group=group,
                    initial_state=state,
                    constants=params.constants,
                    flux=params.flux,
                )
            )
    logger.info(
        "Sampled %d patients (%s)",
        len(patients),
        ", ".join(f"{g.value}={int(counts.get(g, 0))}" for g in AgeGroup),
    )
    return patients


def build_features(
    patient: PatientRecord,
    cgm: np.ndarray,
    scenario: Scenario,
    stats: StandardizationStats,
) -> FeatureVector:
    """
    Assemble the network input for one patient.

    Args:
        patient: Unstandardized record.
        cgm: The nine pre-meal BG readings (mg/dL).
        scenario: Supplies the doses, reported as grams of CHO and insulin units.
        stats: Standardization statistics from the training split.

    Raises:
        ZeroVariance: If a training SD is zero.
    """
    cgm = np.asarray(cgm, float)
    if cgm.shape != (CGM_READINGS,):
        raise ValueError(f"expected {CGM_READINGS} CGM readings, got {cgm.shape}")
    state = [stats.standardize(n, getattr(patient.initial_state, n)) for n in STATE_FEATURES]
    cho_grams = scenario.cho_dose / 1000.0
    bolus_units = scenario.bolus_dose * patient.flux.body_weight / PMOL_PER_UNIT
    return FeatureVector(np.concatenate([state, cgm / CGM_SCALE, [cho_grams, bolus_units]]))


class DatasetSplit(BaseModel):
    model_config = ConfigDict(extra="forbid")

    train: list[PatientRecord]
    validation: list[PatientRecord]
    test: list[PatientRecord]

    @model_validator(mode="after")
    def _disjoint(self) -> "DatasetSplit":
        ids = [p.id for p in self.train + self.validation + self.test]
        if len(ids) != len(set(ids)):
            raise ValueError("split partitions share patient ids")
        return self


def split(
    cohort: Sequence[PatientRecord],
    ratio: float,
    rng_seed: int,
    test: Sequence[PatientRecord] = (),
    *,
    expected_size: int | None = 200,
) -> DatasetSplit:
    """
    Shuffle by seed and cut train/validation at `ratio`; attach the fixed test set.

    Raises:
        WrongCohortSize: If `expected_size` is given and the cohort differs.
    """
    if expected_size is not None and len(cohort) != expected_size:
        raise WrongCohortSize(expected_size, len(cohort))
    order = np.random.default_rng(rng_seed).permutation(len(cohort))
    cut = int(round(ratio * len(cohort)))
    return DatasetSplit(
        train=[cohort[i] for i in order[:cut]],
        validation=[cohort[i] for i in order[cut:]],
        test=list(test),
    )


def save_patients(patients: Iterable[PatientRecord], path: str | Path) -> None:
    Path(path).write_bytes(_PATIENTS.dump_json(list(patients), indent=1))


def load_patients(path: str | Path) -> list[PatientRecord]:
    return _PATIENTS.validate_json(Path(path).read_bytes())


def load_reference_cohort(
    path: str | Path,
    group_parameters: Mapping[AgeGroup, GroupParameters] = DEFAULT_GROUP_PARAMETERS,
) -> list[PatientRecord]:
    """
    Load the fixed 30-patient test fixture.

    The fixture stores id, age and the sampled state entries; constants and
    fluxes come from the group defaults, like sampled patients.
    """
    rows = json.loads(Path(path).read_text())
    patients = []
    for row in rows["patients"]:
        group = group_for_age(row["age"])
        params = group_parameters[group]
        patients.append(
            PatientRecord(
                id=row["id"],
                age=row["age"],
                group=group,
                initial_state=PatientState(**row["state"]),
                constants=params.constants,
                flux=params.flux,
            )
        )
    return patients
