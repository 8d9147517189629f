"""The 13-compartment glucose-insulin system: rates, compressed SCM and BG readout.

State components (units):
    x1, x2  glucose in the stomach, solid and liquid (mg)
    x3      glucose mass in the intestine (mg)
    x4, x5  glucose mass in plasma / rapidly and slowly equilibrating tissue (mg/kg)
    x6      insulin mass in plasma (pmol/kg)
    x7      insulin in the interstitial fluid (pmol/L)
    x8, x9  plasma and delayed insulin (pmol/L)
    x10     insulin mass in the liver (pmol/kg)
    x11,x12 nonmonomeric / monomeric subcutaneous insulin (pmol/kg)
    x13     subcutaneous glucose (mg/kg)

The auxiliary fluxes (EGP, Ra, U_iit, U_idt, E, I) are configurable rules whose
sub-parameters live in FluxParameters. Their defaults follow the usual
simulator conventions and are not taken from any published table.
"""

from __future__ import annotations

import logging
import math
from enum import Enum
from functools import lru_cache
from typing import Callable, Mapping

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from glucose_iit.errors import NonFiniteValue
from glucose_iit.scm import CausalGraph, StructuralEquation

logger = logging.getLogger(__name__)

STATE_VARIABLES: tuple[str, ...] = tuple(f"x{i}" for i in range(1, 14))
CHO = "CHO"
ACTION_INSULIN = "action_insulin"
INPUT_VARIABLES: tuple[str, ...] = (CHO, ACTION_INSULIN)

# Symbols appearing in each rate equation, self excluded.
REGULAR_PARENTS: Mapping[str, tuple[str, ...]] = {
    "x1": (CHO,),
    "x2": ("x1",),
    "x3": ("x2",),
    "x4": ("x3", "x5", "x9"),
    "x5": ("x4", "x7"),
    "x6": ("x10", "x11", "x12"),
    "x7": ("x6",),
    "x8": ("x6",),
    "x9": ("x8",),
    "x10": ("x6",),
    "x11": (ACTION_INSULIN,),
    "x12": ("x11",),
    "x13": ("x4",),
}
# Feedback terms dropped to make the compressed graph acyclic.
REMOVED_TERMS: Mapping[str, str] = {"x5": "x4", "x10": "x6"}
AMENDED_PARENTS: Mapping[str, tuple[str, ...]] = {
    target: tuple(p for p in parents if REMOVED_TERMS.get(target) != p)
    for target, parents in REGULAR_PARENTS.items()
}


class ModelVariant(str, Enum):
    REGULAR = "regular"
    AMENDED = "amended"


class KineticConstants(BaseModel):
    """Rate constants in 1/min; k_Ib is the basal plasma insulin (pmol/L)."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    k_max: float = Field(ge=0)
    k_gut: float = Field(ge=0)
    k_abs: float = Field(ge=0)
    k_p2u: float = Field(ge=0)
    k_i: float = Field(ge=0)
    k_d: float = Field(ge=0)
    k_1: float = Field(ge=0)
    k_2: float = Field(ge=0)
    k_m1: float = Field(ge=0)
    k_m2: float = Field(ge=0)
    k_m3: float = Field(ge=0)
    k_m4: float = Field(ge=0)
    k_a1: float = Field(ge=0)
    k_a2: float = Field(ge=0)
    k_sc: float = Field(ge=0)
    k_Ib: float = Field(ge=0)

    @classmethod
    def zero(cls) -> "KineticConstants":
        return cls(**{name: 0.0 for name in cls.model_fields})


class FluxParameters(BaseModel):
    """
    Sub-parameters of the auxiliary fluxes.

        EGP   = kp1 - kp2 * x4 - kp3 * x9
        Ra    = f * k_abs * x3 / body_weight
        U_iit = u_iit
        U_idt = (vm0 + vmx * x7) * x5 / (km0 + x5)
        E     = ke1 * max(x4 - ke2, 0)
        I     = x6 / v_i
        BG    = x13 / v_g
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    kp1: float = 2.7
    kp2: float = 0.0021
    kp3: float = 0.009
    f: float = Field(default=0.9, ge=0)
    body_weight: float = Field(default=78.0, gt=0)
    u_iit: float = 1.0
    vm0: float = 2.5
    vmx: float = 0.047
    km0: float = Field(default=225.59, ge=0)
    ke1: float = Field(default=0.0005, ge=0)
    ke2: float = 339.0
    v_i: float = Field(default=0.05, gt=0)
    v_g: float = Field(default=1.88, gt=0)

    @model_validator(mode="after")
    def _finite(self) -> "FluxParameters":
        for name, value in self:
            if not math.isfinite(value):
                raise ValueError(f"{name} must be finite")
        return self

    @classmethod
    def zero(cls) -> "FluxParameters":
        """Every flux identically zero (unit volumes and weight keep divisions defined)."""
        return cls(
            kp1=0.0, kp2=0.0, kp3=0.0, f=0.0, body_weight=1.0, u_iit=0.0,
            vm0=0.0, vmx=0.0, km0=0.0, ke1=0.0, ke2=0.0, v_i=1.0, v_g=1.0,
        )


class PatientState(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    x1: float = 0.0
    x2: float = 0.0
    x3: float = 0.0
    x4: float = 0.0
    x5: float = 0.0
    x6: float = 0.0
    x7: float = 0.0
    x8: float = 0.0
    x9: float = 0.0
    x10: float = 0.0
    x11: float = 0.0
    x12: float = 0.0
    x13: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in STATE_VARIABLES], dtype=float)

    @classmethod
    def from_array(cls, values: np.ndarray) -> "PatientState":
        return cls(**{name: float(v) for name, v in zip(STATE_VARIABLES, values)})


class ExogenousInput(BaseModel):
    """Carbohydrate arrival (mg/min) and insulin delivery (pmol/kg/min)."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    CHO: float = Field(default=0.0, ge=0)
    action_insulin: float = Field(default=0.0, ge=0)


RateFunction = Callable[[np.ndarray, float, float], np.ndarray]


def rate_function(
    constants: KineticConstants,
    flux: FluxParameters,
    variant: ModelVariant = ModelVariant.REGULAR,
) -> RateFunction:
    """
    Bind constants once and return f(state, cho, insulin) -> d(state)/dt.

    The amended variant drops the `+k_1 * x4` term of dx5 and the
    `+k_m2 * x6` term of dx10; everything else is shared.
    """
    c = constants
    kmax, kgut, kabs = c.k_max, c.k_gut, c.k_abs
    k1, k2 = c.k_1, c.k_2
    km1, km2, km3, km4 = c.k_m1, c.k_m2, c.k_m3, c.k_m4
    ka1, ka2, kd, ki = c.k_a1, c.k_a2, c.k_d, c.k_i
    kp2u, kib, ksc = c.k_p2u, c.k_Ib, c.k_sc
    fx = flux
    feedback = 1.0 if variant == ModelVariant.REGULAR else 0.0

    def rates(state: np.ndarray, cho: float, insulin: float) -> np.ndarray:
        x1, x2, x3, x4, x5, x6, x7, x8, x9, x10, x11, x12, x13 = (float(v) for v in state)
        egp = fx.kp1 - fx.kp2 * x4 - fx.kp3 * x9
        ra = fx.f * kabs * x3 / fx.body_weight
        u_iit = fx.u_iit
        saturation = fx.km0 + x5
        u_idt = (fx.vm0 + fx.vmx * x7) * x5 / saturation if saturation != 0 else 0.0
        excretion = fx.ke1 * max(x4 - fx.ke2, 0.0)
        plasma_insulin = x6 / fx.v_i
        return np.array(
            [
                -kmax * x1 + cho,
                kmax * x1 - x2 * kgut,
                kgut * x2 - kabs * x3,
                egp + ra - u_iit - excretion - k1 * x4 + k2 * x5,
                -u_idt + feedback * k1 * x4 - k2 * x5,
                -(km2 + km4) * x6 + km1 * x10 + ka1 * x11 + ka2 * x12,
                -kp2u * x7 + kp2u * (plasma_insulin - kib),
                -ki * (x8 - plasma_insulin),
                -ki * (x9 - x8),
                -(km1 + km3) * x10 + feedback * km2 * x6,
                insulin - (ka1 + kd) * x11,
                kd * x11 - ka2 * x12,
                -ksc * x13 + ksc * x4,
            ]
        )

    return rates


def derivatives(
    state: PatientState | np.ndarray,
    constants: KineticConstants,
    flux: FluxParameters,
    inputs: ExogenousInput,
    variant: ModelVariant = ModelVariant.REGULAR,
) -> np.ndarray:
    """
    Evaluate the 13 rate equations (regular form unless `variant` says otherwise).

    Raises:
        NonFiniteValue: If any component is NaN or infinite.
    """
    vector = state.as_array() if isinstance(state, PatientState) else np.asarray(state, float)
    result = rate_function(constants, flux, variant)(vector, inputs.CHO, inputs.action_insulin)
    if not np.all(np.isfinite(result)):
        bad = STATE_VARIABLES[int(np.flatnonzero(~np.isfinite(result))[0])]
        raise NonFiniteValue(f"d{bad}/dt")
    return result


def bg_readout(state: PatientState | np.ndarray, flux: FluxParameters) -> float:
    """Blood glucose in mg/dL: subcutaneous glucose over the distribution volume."""
    x13 = state.x13 if isinstance(state, PatientState) else float(np.asarray(state)[12])
    value = x13 / flux.v_g
    if not math.isfinite(value):
        raise NonFiniteValue("bg")
    return value


def initial_name(variable: str) -> str:
    return f"{variable}_0"


def parents_for(variant: ModelVariant) -> Mapping[str, tuple[str, ...]]:
    return AMENDED_PARENTS if variant == ModelVariant.AMENDED else REGULAR_PARENTS


def _compressed_rule(
    target: str, parents: tuple[str, ...], rates: RateFunction, horizon: float
) -> Callable[[Mapping[str, float]], float]:
    index = STATE_VARIABLES.index(target)
    initial = initial_name(target)
    endogenous = [(STATE_VARIABLES.index(p), p) for p in parents if p in STATE_VARIABLES]

    def rule(values: Mapping[str, float]) -> float:
        state = np.zeros(len(STATE_VARIABLES))
        state[index] = values[initial]
        for position, name in endogenous:
            state[position] = values[name]
        slope = rates(state, values.get(CHO, 0.0), values.get(ACTION_INSULIN, 0.0))[index]
        return values[initial] + horizon * slope

    return rule


@lru_cache(maxsize=128)
def build_compressed_scm(
    variant: ModelVariant,
    constants: KineticConstants,
    flux: FluxParameters,
    horizon_minutes: float,
) -> CausalGraph:
    """
    Compress the dynamics into one leap of `horizon_minutes`.

    Each endogenous variable becomes
        x_i(H) = x_i(0) + H * dx_i/dt
    with the slope evaluated on the horizon values of its parents and on its
    own initial value. Exogenous inputs are the 13 initial values plus the
    CHO and insulin rates. The regular variant keeps the two feedback terms
    and so is only useful for structure export.
    """
    rates = rate_function(constants, flux, variant)
    table = parents_for(variant)
    equations = []
    for target in STATE_VARIABLES:
        parents = (initial_name(target),) + table[target]
        equations.append(
            StructuralEquation(
                target=target,
                parents=parents,
                rule=_compressed_rule(target, parents, rates, float(horizon_minutes)),
                rule_id=f"compressed:{variant.value}:d{target}dt",
            )
        )
    exogenous = [initial_name(v) for v in STATE_VARIABLES] + list(INPUT_VARIABLES)
    return CausalGraph.build(equations, exogenous)


def exogenous_values(
    state: PatientState, cho_dose: float, bolus_dose: float, horizon_minutes: float
) -> dict[str, float]:
    """
    Inputs of the compressed SCM for one patient.

    Doses (CHO in mg, bolus in pmol/kg) are spread over the compressed step
    as rates, so a zero horizon contributes nothing.
    """
    values = {initial_name(name): getattr(state, name) for name in STATE_VARIABLES}
    spread = 1.0 / horizon_minutes if horizon_minutes > 0 else 0.0
    values[CHO] = cho_dose * spread
    values[ACTION_INSULIN] = bolus_dose * spread
    return values
