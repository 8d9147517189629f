"""Run configuration: one JSON file validated into pydantic models."""

from __future__ import annotations

import json
import logging
import os
from pathlib import Path
from typing import Sequence

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from glucose_iit.alignment import LossWeights, TrainingMode
from glucose_iit.cohort import (
    DEFAULT_COUNTS,
    DEFAULT_DISTRIBUTION,
    DEFAULT_GROUP_PARAMETERS,
    AgeGroup,
    DistributionTable,
    GroupParameters,
)
from glucose_iit.errors import ConfigError
from glucose_iit.glucose_model import ModelVariant
from glucose_iit.neural import Architecture
from glucose_iit.simulation import PREDICTION_HORIZONS, ScenarioSettings
from glucose_iit.training import MatrixCell, TrainConfig, expand_grid

logger = logging.getLogger(__name__)

OUTPUT_ENV_VAR = "GLUCOSE_IIT_OUTPUT"
DEFAULT_SEEDS: tuple[int, ...] = (0, 1, 2, 3, 4, 5, 6, 7, 8, 9)


class CohortConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    counts: dict[AgeGroup, int] = Field(default_factory=lambda: dict(DEFAULT_COUNTS))
    seed: int = 0
    split_ratio: float = Field(default=0.8, gt=0, lt=1)
    expected_size: int | None = None
    distribution: DistributionTable = DEFAULT_DISTRIBUTION
    group_parameters: dict[AgeGroup, GroupParameters] = Field(
        default_factory=lambda: dict(DEFAULT_GROUP_PARAMETERS)
    )

    @field_validator("counts")
    @classmethod
    def _nonnegative(cls, counts: dict[AgeGroup, int]) -> dict[AgeGroup, int]:
        if any(n < 0 for n in counts.values()):
            raise ValueError("group counts must be nonnegative")
        return counts


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    variants: list[ModelVariant] = [ModelVariant.AMENDED]
    architectures: list[Architecture] = [Architecture.TREE]
    hidden_sizes: list[int] = [256]
    leaky_slope: float = Field(default=0.01, gt=0)
    dropout: float = Field(default=0.3, ge=0, lt=1)


class TrainingSection(BaseModel):
    """Optimizer and schedule; per-cell fields (mode, PH, model) come from the grid."""

    model_config = ConfigDict(extra="forbid")

    batch_size: int = 2
    grad_accumulation_steps: int = 20
    max_epochs: int = 300
    early_stop_patience: int = 20
    clip_max_norm: float = 1.0
    warmup_fraction: float = 0.1
    lr: float = 0.01
    eps: float = 1e-6
    betas: tuple[float, float] = (0.9, 0.98)
    weight_decay: float = 0.01
    phs: list[int] = Field(default_factory=lambda: list(PREDICTION_HORIZONS))
    modes: list[TrainingMode] = [TrainingMode.IIT, TrainingMode.STANDARD]
    seeds: list[int] = Field(default_factory=lambda: list(DEFAULT_SEEDS))


class AlignmentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    tau_scale: float = Field(default=0.01, gt=0)
    excluded_sites: list[str] = ["X7"]
    loss_weights: LossWeights = LossWeights()


class PathsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    output_root: Path = Path("runs_output")
    reference_cohort: Path = Path("data/reference_cohort.json")


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    cohort: CohortConfig = CohortConfig()
    scenario: ScenarioSettings = ScenarioSettings()
    model: ModelConfig = ModelConfig()
    training: TrainingSection = TrainingSection()
    alignment: AlignmentConfig = AlignmentConfig()
    paths: PathsConfig = PathsConfig()
    workers: int = Field(default=1, gt=0)

    @model_validator(mode="after")
    def _training_settings(self) -> "RunConfig":
        TrainConfig(**self.training.model_dump(exclude={"phs", "modes", "seeds"}))
        return self

    def cells(self) -> list[MatrixCell]:
        return expand_grid(
            self.model.variants,
            self.model.architectures,
            self.model.hidden_sizes,
            self.training.phs,
            self.training.modes,
            self.training.seeds,
        )

    def train_config(self, cell: MatrixCell) -> TrainConfig:
        """Validated per-cell training configuration."""
        section = self.training.model_dump(exclude={"phs", "modes", "seeds"})
        return TrainConfig(
            **section,
            mode=cell.mode,
            ph=cell.ph,
            variant=cell.variant,
            architecture=cell.architecture,
            hidden_size=cell.hidden_size,
            leaky_slope=self.model.leaky_slope,
            dropout=self.model.dropout,
            tau_scale=self.alignment.tau_scale,
            loss_weights=self.alignment.loss_weights,
            excluded_sites=tuple(self.alignment.excluded_sites),
        )

    def output_root(self, override: str | Path | None = None) -> Path:
        """--output flag, then $GLUCOSE_IIT_OUTPUT, then paths.output_root."""
        if override:
            return Path(override)
        if os.environ.get(OUTPUT_ENV_VAR):
            return Path(os.environ[OUTPUT_ENV_VAR])
        return self.paths.output_root


def _line_of(text: str, loc: Sequence[str | int]) -> int | None:
    """
    Line of the deepest key of `loc` found in `text`.

    Keys are searched in order, each after the previous match, so a nested
    key resolves inside its parent object. List indices are skipped.
    Missing keys (e.g. a required field) leave the parent's line.
    """
    position, line = 0, None
    for part in loc:
        if isinstance(part, int):
            continue
        found = text.find(json.dumps(str(part)), position)
        if found < 0:
            continue
        position = found
        line = text.count("\n", 0, found) + 1
    return line


def _format_validation(error: ValidationError, text: str, source: str) -> str:
    lines = []
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"]) or "<root>"
        line = _line_of(text, item["loc"])
        where = f"{source}:{line}" if line is not None else source
        lines.append(f"{where}: {location}: {item['msg']}")
    return "; ".join(lines)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """
    Validate JSON text into a RunConfig.

    Raises:
        ConfigError: With line and column for malformed JSON, or the line and
            dotted path of every offending field for schema violations.
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc, text, source)) from exc


def load_config(path: str | Path | None) -> RunConfig:
    """Load a config file; no path means every default."""
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"Cannot read config file {path}: {exc}") from exc
    config = parse_config(text, str(path))
    logger.debug("Loaded config from %s", path)
    return config


def override_seeds(config: RunConfig, seeds: Sequence[int]) -> RunConfig:
    """Copy of `config` with the cohort seed and the training seeds replaced."""
    seeds = list(seeds)
    return config.model_copy(
        update={
            "cohort": config.cohort.model_copy(update={"seed": seeds[0]}),
            "training": config.training.model_copy(update={"seeds": seeds}),
        }
    )
