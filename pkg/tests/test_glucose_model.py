from __future__ import annotations

import math

import numpy as np
import pytest

from glucose_iit.errors import NonFiniteValue
from glucose_iit.glucose_model import (
    STATE_VARIABLES,
    ExogenousInput,
    FluxParameters,
    KineticConstants,
    ModelVariant,
    PatientState,
    bg_readout,
    build_compressed_scm,
    derivatives,
    exogenous_values,
)
from glucose_iit.scm import evaluate
from glucose_iit.simulation import Scenario, compressed_target_bg

from tests.conftest import ADULT_MEAN_STATE, toy_patient


def test_zero_dynamics_have_zero_rates():
    rates = derivatives(
        PatientState(**ADULT_MEAN_STATE), KineticConstants.zero(), FluxParameters.zero(), ExogenousInput()
    )
    assert np.all(rates == 0.0)


def test_cho_only_enters_gut():
    rates = derivatives(
        PatientState(), KineticConstants.zero(), FluxParameters.zero(), ExogenousInput(CHO=1500.0)
    )
    assert rates[0] == 1500.0
    assert np.all(rates[1:] == 0.0)


def test_stomach_empties_into_gut():
    constants = KineticConstants.zero().model_copy(update={"k_max": 0.5})
    rates = derivatives(PatientState(x1=10.0), constants, FluxParameters.zero(), ExogenousInput())
    assert rates[0] == pytest.approx(-5.0)
    assert rates[1] == pytest.approx(5.0)
    assert np.all(rates[2:] == 0.0)


def test_subcutaneous_insulin_compartments():
    constants = KineticConstants.zero().model_copy(update={"k_a1": 0.1, "k_d": 0.2})
    rates = derivatives(PatientState(x11=4.0), constants, FluxParameters.zero(), ExogenousInput())
    x11 = STATE_VARIABLES.index("x11")
    assert rates[x11] == pytest.approx(-1.2)
    assert rates[x11 + 1] == pytest.approx(0.8)


def test_amended_drops_feedback_terms(adult_patient):
    state = adult_patient.initial_state
    args = (state, adult_patient.constants, adult_patient.flux, ExogenousInput())
    regular = derivatives(*args, variant=ModelVariant.REGULAR)
    amended = derivatives(*args, variant=ModelVariant.AMENDED)
    c = adult_patient.constants
    x5, x10 = STATE_VARIABLES.index("x5"), STATE_VARIABLES.index("x10")
    assert regular[x5] - amended[x5] == pytest.approx(c.k_1 * state.x4)
    assert regular[x10] - amended[x10] == pytest.approx(c.k_m2 * state.x6)
    others = [i for i in range(13) if i not in (x5, x10)]
    np.testing.assert_array_equal(regular[others], amended[others])


def test_bg_readout():
    assert bg_readout(PatientState(x13=188.0), FluxParameters()) == pytest.approx(100.0)
    assert bg_readout(PatientState(x13=260.42), FluxParameters()) == pytest.approx(138.52, abs=0.01)
    assert bg_readout(PatientState(), FluxParameters()) == 0.0


def test_non_finite_state_is_reported():
    state = PatientState().as_array()
    state[3] = math.inf
    with pytest.raises(NonFiniteValue):
        derivatives(state, KineticConstants.zero(), FluxParameters(), ExogenousInput())


def test_state_array_round_trip():
    state = PatientState(**ADULT_MEAN_STATE)
    assert PatientState.from_array(state.as_array()) == state


def test_compressed_dose_spreads_over_horizon():
    graph = build_compressed_scm(ModelVariant.AMENDED, KineticConstants.zero(), FluxParameters.zero(), 30.0)
    values = evaluate(graph, exogenous_values(PatientState(), 45_000.0, 0.0, 30.0))
    assert values["x1"] == pytest.approx(45_000.0)
    assert values["x2"] == 0.0


def test_compressed_zero_horizon_returns_initial_values(adult_patient):
    graph = build_compressed_scm(ModelVariant.AMENDED, adult_patient.constants, adult_patient.flux, 0.0)
    values = evaluate(graph, exogenous_values(adult_patient.initial_state, 45_000.0, 100.0, 0.0))
    for name in STATE_VARIABLES:
        assert values[name] == getattr(adult_patient.initial_state, name)


def test_compressed_target_zero_dynamics():
    patient = toy_patient(x4=120.0, x13=150.0)
    assert compressed_target_bg(patient, Scenario(), 60) == 150.0


def test_compressed_target_single_leap():
    constants = KineticConstants.zero().model_copy(update={"k_sc": 0.01})
    patient = toy_patient(constants=constants, x4=200.0, x13=100.0)
    # x13(H) = 100 + 30 * 0.01 * (200 - 100)
    assert compressed_target_bg(patient, Scenario(), 30) == pytest.approx(130.0)


def test_compressed_graph_is_cached(adult_patient):
    first = build_compressed_scm(ModelVariant.AMENDED, adult_patient.constants, adult_patient.flux, 30.0)
    second = build_compressed_scm(ModelVariant.AMENDED, adult_patient.constants, adult_patient.flux, 30.0)
    assert first is second
