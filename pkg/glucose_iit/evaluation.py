"""Test-set metrics, Clarke error grid zones, run reports and report files."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict

from glucose_iit import plots
from glucose_iit.alignment import (
    AlignmentMap,
    CounterfactualOracle,
    Example,
    InterventionSample,
    TrainingMode,
    counterfactual_prediction,
)
from glucose_iit.errors import EmptySet
from glucose_iit.neural import ModuleNetwork
from glucose_iit.simulation import ScenarioSettings
from glucose_iit.training import MatrixCell, TrainConfig, TrainLog

logger = logging.getLogger(__name__)

METRICS: tuple[str, ...] = (
    "mse", "mae", "rmse", "ega_ab", "zone_a", "zone_b", "zone_c", "zone_d", "zone_e",
)
# Lower is better except for the clinically acceptable share and zone A.
HIGHER_IS_BETTER: frozenset[str] = frozenset({"ega_ab", "zone_a"})
GROUP_KEYS: tuple[str, ...] = ("variant", "architecture", "hidden_size", "ph")
RUN_KEYS: tuple[str, ...] = GROUP_KEYS + ("mode", "seed")


@dataclass(frozen=True)
class PredictionSet:
    """Reference and predicted BG in mg/dL, one pair per test patient."""

    reference: np.ndarray
    predicted: np.ndarray

    def __post_init__(self) -> None:
        if self.reference.shape != self.predicted.shape or self.reference.ndim != 1:
            raise ValueError("reference and predicted must be 1-d arrays of equal length")
        if not (np.all(np.isfinite(self.reference)) and np.all(np.isfinite(self.predicted))):
            raise ValueError("prediction sets must hold finite values")

    @classmethod
    def of(cls, reference: Sequence[float], predicted: Sequence[float]) -> "PredictionSet":
        return cls(np.asarray(reference, float), np.asarray(predicted, float))

    def __len__(self) -> int:
        return len(self.reference)

    def _require(self) -> None:
        if len(self) == 0:
            raise EmptySet("metric requested on an empty prediction set")


def mse(predictions: PredictionSet) -> float:
    predictions._require()
    return float(np.mean((predictions.reference - predictions.predicted) ** 2))


def mae(predictions: PredictionSet) -> float:
    predictions._require()
    return float(np.mean(np.abs(predictions.reference - predictions.predicted)))


def rmse(predictions: PredictionSet) -> float:
    return math.sqrt(mse(predictions))


class EgaZone(str, Enum):
    A = "A"
    B = "B"
    C = "C"
    D = "D"
    E = "E"


def ega_zone(ref: float, pred: float) -> EgaZone:
    """Clarke error grid zone of one (reference, prediction) pair, in mg/dL."""
    if ref < 0 or pred < 0:
        raise ValueError("blood glucose values must be nonnegative")
    if (ref <= 70 and pred <= 70) or abs(pred - ref) <= 0.2 * ref:
        return EgaZone.A
    if (ref >= 180 and pred <= 70) or (ref <= 70 and pred >= 180):
        return EgaZone.E
    if (70 <= ref <= 290 and pred >= ref + 110) or (130 <= ref <= 180 and pred <= 1.4 * ref - 182):
        return EgaZone.C
    if (
        (ref >= 240 and 70 <= pred <= 180)
        or (ref <= 175 / 3 and 70 <= pred <= 180)
        or (175 / 3 <= ref <= 70 and pred >= 1.2 * ref)
    ):
        return EgaZone.D
    return EgaZone.B


def zone_shares(predictions: PredictionSet) -> dict[EgaZone, float]:
    """Percentage of pairs falling in each zone; the five shares sum to 100."""
    predictions._require()
    counts = {zone: 0 for zone in EgaZone}
    for ref, pred in zip(predictions.reference, predictions.predicted):
        counts[ega_zone(float(ref), float(pred))] += 1
    return {zone: 100.0 * n / len(predictions) for zone, n in counts.items()}


def ega_share_ab(predictions: PredictionSet) -> float:
    shares = zone_shares(predictions)
    return shares[EgaZone.A] + shares[EgaZone.B]


def compute_metrics(predictions: PredictionSet) -> dict[str, float]:
    shares = zone_shares(predictions)
    metrics = {
        "mse": mse(predictions),
        "mae": mae(predictions),
        "rmse": rmse(predictions),
        "ega_ab": shares[EgaZone.A] + shares[EgaZone.B],
    }
    metrics.update({f"zone_{zone.value.lower()}": share for zone, share in shares.items()})
    return metrics


class PredictionRow(BaseModel):
    model_config = ConfigDict(extra="forbid")

    patient_id: str
    reference: float
    predicted: float
    zone: EgaZone


class InterventionRow(BaseModel):
    model_config = ConfigDict(extra="forbid")

    module: str
    base_id: str
    source_id: str
    abs_error: float


class RunReport(BaseModel):
    """Everything one trained cell contributes to the report files."""

    model_config = ConfigDict(extra="forbid")

    cell: MatrixCell
    train_config: TrainConfig
    metrics: dict[str, float]
    predictions: list[PredictionRow]
    interventions: list[InterventionRow]
    best_epoch: int
    last_epoch: int
    stopped_early: bool

    @property
    def run_id(self) -> str:
        return self.cell.run_id

    def prediction_set(self) -> PredictionSet:
        return PredictionSet.of(
            [r.reference for r in self.predictions], [r.predicted for r in self.predictions]
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.model_dump_json(indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "RunReport":
        return cls.model_validate_json(Path(path).read_text())


def intervention_errors(
    net: ModuleNetwork,
    examples: Sequence[Example],
    oracle: CounterfactualOracle,
    alignment: AlignmentMap,
) -> list[InterventionRow]:
    """
    Absolute counterfactual error (mg/dL) of every eligible site on every test pair.

    Consecutive patients are paired and both orderings are used.
    """
    rows = []
    for a, b in zip(examples[0::2], examples[1::2]):
        for base, source in ((a, b), (b, a)):
            for module in alignment.eligible_modules():
                sample = InterventionSample.create(base, source, module, alignment)
                predicted = counterfactual_prediction(net, sample)
                error = abs(oracle.tau.inverse(predicted) - oracle.tau.inverse(oracle.target(sample)))
                rows.append(
                    InterventionRow(
                        module=module,
                        base_id=base.patient.id,
                        source_id=source.patient.id,
                        abs_error=error,
                    )
                )
    return rows


def evaluate_run(
    net: ModuleNetwork,
    cell: MatrixCell,
    config: TrainConfig,
    test: Sequence[Example],
    log: TrainLog,
    oracle: CounterfactualOracle | None = None,
    settings: ScenarioSettings = ScenarioSettings(),
) -> RunReport:
    """
    Metrics of the (best-checkpoint) network on the test fixture.

    Predictions are de-scaled to mg/dL; both sides are floored at zero before scoring.
    Without an `oracle`, counterfactual targets use `settings`, which must be
    the scenario the test examples were simulated with.
    """
    if not test:
        raise EmptySet("test fixture is empty")
    tau = config.tau
    predicted = [
        max(tau.inverse(net.forward(e.features, "eval").prediction), 0.0) for e in test
    ]
    references = [max(e.target_bg, 0.0) for e in test]
    predictions = PredictionSet.of(references, predicted)
    rows = [
        PredictionRow(patient_id=e.patient.id, reference=r, predicted=p, zone=ega_zone(r, p))
        for e, r, p in zip(test, references, predicted)
    ]
    oracle = oracle or CounterfactualOracle(config.variant, config.ph, tau, settings)
    interventions = intervention_errors(net, test, oracle, config.alignment())
    report = RunReport(
        cell=cell,
        train_config=config,
        metrics=compute_metrics(predictions),
        predictions=rows,
        interventions=interventions,
        best_epoch=log.best_epoch,
        last_epoch=log.last_epoch,
        stopped_early=log.stopped_early,
    )
    logger.info(
        "%s: RMSE %.2f mg/dL, EGA A+B %.1f%%",
        cell.run_id,
        report.metrics["rmse"],
        report.metrics["ega_ab"],
    )
    return report


def _cell_columns(cell: MatrixCell) -> dict[str, object]:
    return {
        "variant": cell.variant.value,
        "architecture": cell.architecture.value,
        "hidden_size": cell.hidden_size,
        "ph": cell.ph,
        "mode": cell.mode.value,
        "seed": cell.seed,
    }


def metrics_frame(reports: Sequence[RunReport]) -> pd.DataFrame:
    """One row per run, metrics in mg/dL (MSE in (mg/dL)²) and percent."""
    rows = [
        {"run_id": r.run_id, **_cell_columns(r.cell), **{m: r.metrics[m] for m in METRICS}}
        for r in reports
    ]
    return pd.DataFrame(rows, columns=["run_id", *RUN_KEYS, *METRICS]).sort_values(
        ["run_id"], kind="stable"
    ).reset_index(drop=True)


def aggregate_reports(reports: Sequence[RunReport]) -> pd.DataFrame:
    """
    Mean and sample SD of each metric per (variant, architecture, hidden size, PH, mode).

    The wide layout puts both modes side by side with `<metric>_delta` =
    IIT mean − standard mean and `<metric>_better` telling which mode wins.
    """
    frame = metrics_frame(reports)
    rows = []
    for keys, group in frame.groupby(list(GROUP_KEYS), sort=True):
        row: dict[str, object] = dict(zip(GROUP_KEYS, keys))
        for metric in METRICS:
            for mode in TrainingMode:
                values = group.loc[group["mode"] == mode.value, metric]
                row[f"{metric}_{mode.value}_mean"] = values.mean() if len(values) else np.nan
                row[f"{metric}_{mode.value}_sd"] = values.std(ddof=1) if len(values) else np.nan
            delta = row[f"{metric}_iit_mean"] - row[f"{metric}_standard_mean"]
            row[f"{metric}_delta"] = delta
            if math.isnan(delta) or delta == 0:
                row[f"{metric}_better"] = ""
            elif (delta > 0) == (metric in HIGHER_IS_BETTER):
                row[f"{metric}_better"] = TrainingMode.IIT.value
            else:
                row[f"{metric}_better"] = TrainingMode.STANDARD.value
        row["n_runs"] = len(group)
        rows.append(row)
    return pd.DataFrame(rows)


def intervention_frame(reports: Sequence[RunReport]) -> pd.DataFrame:
    """Per-intervention absolute errors of every run (the box-plot data)."""
    rows = [
        {"run_id": r.run_id, **_cell_columns(r.cell), **row.model_dump()}
        for r in reports
        for row in r.interventions
    ]
    return pd.DataFrame(
        rows, columns=["run_id", *RUN_KEYS, "module", "base_id", "source_id", "abs_error"]
    )


def summarize_interventions(frame: pd.DataFrame) -> pd.DataFrame:
    """Mean ± SD of the absolute counterfactual error per (run group, mode, module)."""
    keys = [*GROUP_KEYS, "mode", "module"]
    return (
        frame.groupby(keys, sort=True)["abs_error"]
        .agg(mean="mean", sd="std", count="count")
        .reset_index()
    )


def emit_report(
    reports: Sequence[RunReport],
    out_dir: str | Path,
    lint_logs: Mapping[str, str | Path] | None = None,
) -> list[Path]:
    """
    Write the report files for `reports` into `out_dir`.

    metrics.csv, aggregate.csv, lint_modules.csv, lint_modules.svg and one
    ega_<run_id>.svg per run; lint_curve_<run_id>.svg for every run whose
    lint log is given and exists.
    """
    if not reports:
        raise EmptySet("no runs to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def _csv(frame: pd.DataFrame, name: str) -> None:
        path = out / name
        frame.to_csv(path, index=False, float_format="%.10g")
        written.append(path)

    def _svg(content: str, name: str) -> None:
        path = out / name
        plots.write_svg(content, path)
        written.append(path)

    _csv(metrics_frame(reports), "metrics.csv")
    _csv(aggregate_reports(reports), "aggregate.csv")
    interventions = intervention_frame(reports)
    _csv(interventions, "lint_modules.csv")

    groups: dict[str, list[float]] = {}
    for module, errors in interventions.groupby("module", sort=False)["abs_error"]:
        groups[str(module)] = errors.tolist()
    _svg(
        plots.box_plot_svg(groups, "Counterfactual error per module", "|error| (mg/dL)"),
        "lint_modules.svg",
    )
    for report in reports:
        predictions = report.prediction_set()
        _svg(
            plots.ega_scatter_svg(predictions.reference, predictions.predicted, report.run_id),
            f"ega_{report.run_id}.svg",
        )
        log_path = Path(lint_logs[report.run_id]) if lint_logs and report.run_id in lint_logs else None
        if log_path is not None and log_path.exists():
            log = pd.read_csv(log_path)
            series = {
                str(module): (rows["epoch"].tolist(), rows["mse"].tolist())
                for module, rows in log.groupby("module", sort=False)
            }
            _svg(
                plots.line_chart_svg(series, f"L_INT per module, {report.run_id}", "MSE"),
                f"lint_curve_{report.run_id}.svg",
            )
    logger.info("Wrote %d report files to %s", len(written), out)
    return written


def read_report(out_dir: str | Path) -> dict[str, pd.DataFrame]:
    """Load the CSV tables written by emit_report, keyed by file stem."""
    out = Path(out_dir)
    tables = {}
    for name in ("metrics", "aggregate", "lint_modules"):
        path = out / f"{name}.csv"
        if not path.exists():
            raise FileNotFoundError(path)
        tables[name] = pd.read_csv(path)
    return tables
