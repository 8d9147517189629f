"""Exception hierarchy shared by every stage of the pipeline."""

from __future__ import annotations

from typing import Iterable, Sequence


class GlucoseIITError(Exception):
    """Base class for all errors raised by the library."""


class ConfigError(GlucoseIITError):
    """The run configuration could not be parsed or validated."""


class MissingInput(GlucoseIITError):
    def __init__(self, path: str) -> None:
        super().__init__(f"Required input not found: {path}. Run the upstream subcommand first.")
        self.path = path


class CycleDetected(GlucoseIITError):
    def __init__(self, components: Sequence[Sequence[str]]) -> None:
        self.components = [sorted(c) for c in components]
        listing = "; ".join("{" + ", ".join(c) + "}" for c in self.components)
        super().__init__(f"Graph is cyclic; strongly connected components: {listing}")


class UnknownVariable(GlucoseIITError):
    def __init__(self, name: str) -> None:
        super().__init__(f"Unknown variable: {name}")
        self.name = name


class MissingExogenous(GlucoseIITError):
    def __init__(self, names: Iterable[str]) -> None:
        self.names = sorted(names)
        super().__init__(f"Missing exogenous values: {', '.join(self.names)}")


class NonFiniteValue(GlucoseIITError):
    def __init__(self, where: str | int) -> None:
        super().__init__(f"Non-finite value produced at {where}")
        self.where = where


class StepTooLarge(GlucoseIITError):
    def __init__(self, step: int, magnitude: float) -> None:
        super().__init__(f"State magnitude {magnitude:.3g} exceeds the bound at step {step}")
        self.step = step
        self.magnitude = magnitude


class MissingDistributionEntry(GlucoseIITError):
    def __init__(self, parameter: str, group: str) -> None:
        super().__init__(f"No distribution for {parameter} in age group {group}")
        self.parameter = parameter
        self.group = group


class ResamplingExhausted(GlucoseIITError):
    def __init__(self, parameter: str, group: str, attempts: int) -> None:
        super().__init__(
            f"Could not draw a nonnegative {parameter} for age group {group} in {attempts} attempts"
        )
        self.parameter = parameter
        self.group = group
        self.attempts = attempts


class ZeroVariance(GlucoseIITError):
    def __init__(self, parameter: str) -> None:
        super().__init__(f"Training standard deviation of {parameter} is zero")
        self.parameter = parameter


class WrongCohortSize(GlucoseIITError):
    def __init__(self, expected: int, actual: int) -> None:
        super().__init__(f"Expected a cohort of {expected} patients, got {actual}")
        self.expected = expected
        self.actual = actual


class UnknownModule(GlucoseIITError):
    def __init__(self, name: str) -> None:
        super().__init__(f"Network has no module named {name}")
        self.name = name


class StaleTrace(GlucoseIITError):
    """A train-mode trace is missing the dropout masks needed for backward."""


class EmptySiteSet(GlucoseIITError):
    """An intervention sample or alignment entry has no aligned variables."""


class NonFiniteGradient(GlucoseIITError):
    def __init__(self, parameter: str) -> None:
        super().__init__(f"Non-finite gradient for parameter {parameter}")
        self.parameter = parameter


class DivergedLoss(GlucoseIITError):
    def __init__(self, epoch: int) -> None:
        super().__init__(f"Training loss became non-finite at epoch {epoch}")
        self.epoch = epoch


class EmptySet(GlucoseIITError):
    """A metric was requested on an empty prediction set."""
