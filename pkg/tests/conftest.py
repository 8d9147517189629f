from __future__ import annotations

from pathlib import Path

import pytest

from glucose_iit.alignment import Example, TrainingMode
from glucose_iit.cohort import (
    DEFAULT_DISTRIBUTION,
    DEFAULT_GROUP_PARAMETERS,
    AgeGroup,
    PatientRecord,
    StandardizationStats,
    load_reference_cohort,
    sample_cohort,
)
from glucose_iit.evaluation import METRICS, RunReport
from glucose_iit.glucose_model import FluxParameters, KineticConstants, ModelVariant, PatientState
from glucose_iit.neural import Architecture
from glucose_iit.simulation import ScenarioSettings
from glucose_iit.training import MatrixCell, TrainConfig, make_examples

REPO_ROOT = Path(__file__).resolve().parents[1]
REFERENCE_COHORT = REPO_ROOT / "data" / "reference_cohort.json"
DEFAULT_CONFIG = REPO_ROOT / "data" / "default_config.json"

ADULT_MEAN_STATE = dict(
    x4=258.58, x5=194.25, x6=5.94, x8=105.03, x9=105.03, x10=3.50, x11=87.84, x12=112.09, x13=258.58
)


def toy_patient(
    constants: KineticConstants | None = None,
    flux: FluxParameters | None = None,
    patient_id: str = "toy",
    **state: float,
) -> PatientRecord:
    """Adult record with arbitrary dynamics; zero constants and fluxes by default."""
    return PatientRecord(
        id=patient_id,
        age=40,
        group=AgeGroup.ADULT,
        initial_state=PatientState(**state),
        constants=constants or KineticConstants.zero(),
        flux=flux or FluxParameters.zero(),
    )


@pytest.fixture
def adult_patient() -> PatientRecord:
    params = DEFAULT_GROUP_PARAMETERS[AgeGroup.ADULT]
    return PatientRecord(
        id="adult-mean",
        age=40,
        group=AgeGroup.ADULT,
        initial_state=PatientState(**ADULT_MEAN_STATE),
        constants=params.constants,
        flux=params.flux,
    )


@pytest.fixture
def reference_cohort() -> list[PatientRecord]:
    return load_reference_cohort(REFERENCE_COHORT)


@pytest.fixture(scope="session")
def adults() -> list[PatientRecord]:
    return sample_cohort(DEFAULT_DISTRIBUTION, {AgeGroup.ADULT: 40}, rng_seed=11)


@pytest.fixture(scope="session")
def amended_examples(adults: list[PatientRecord]) -> list[Example]:
    """Forty adults with amended PH-30 targets, standardized on themselves."""
    stats = StandardizationStats.from_patients(adults)
    return make_examples(adults, stats, 30, ModelVariant.AMENDED, ScenarioSettings())


def make_report(mode: str, seed: int, **metrics: float) -> RunReport:
    """Report with fabricated metrics (unspecified ones are 0) and no rows."""
    cell = MatrixCell(
        variant=ModelVariant.AMENDED,
        architecture=Architecture.TREE,
        hidden_size=8,
        ph=30,
        mode=TrainingMode(mode),
        seed=seed,
    )
    config = TrainConfig(hidden_size=8, max_epochs=2, early_stop_patience=1, mode=TrainingMode(mode))
    return RunReport(
        cell=cell,
        train_config=config,
        metrics={name: metrics.get(name, 0.0) for name in METRICS},
        predictions=[],
        interventions=[],
        best_epoch=1,
        last_epoch=2,
        stopped_early=False,
    )
