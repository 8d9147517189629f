"""Command-line entry point: cohort → simulate → train → eval → report.

Run:
  python -m glucose_iit cohort --config data/default_config.json
  python -m glucose_iit simulate
  python -m glucose_iit train --seed 3
  python -m glucose_iit eval
  python -m glucose_iit report
"""

from __future__ import annotations

import argparse
import functools
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Sequence

import pandas as pd
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from glucose_iit import neural
from glucose_iit.alignment import CounterfactualOracle
from glucose_iit.cohort import (
    AgeGroup,
    DatasetSplit,
    StandardizationStats,
    load_reference_cohort,
    sample_cohort,
    save_patients,
    split,
)
from glucose_iit.config import RunConfig, load_config, override_seeds
from glucose_iit.errors import ConfigError, GlucoseIITError, MissingInput, WrongCohortSize
from glucose_iit.evaluation import RunReport, aggregate_reports, emit_report, evaluate_run
from glucose_iit.simulation import cgm_history, simulate_target
from glucose_iit.training import (
    ACCUMULATION_NOTE,
    CellOutcome,
    MatrixCell,
    TrainLog,
    prepare_examples,
    run_matrix,
    train,
)

logger = logging.getLogger(__name__)
console = Console()

EXIT_OK = 0
EXIT_USER_ERROR = 1
EXIT_RUN_FAILURE = 2

COHORT_FILE = "cohort.json"
SPLIT_FILE = "split.json"
STATS_FILE = "stats.json"
TARGETS_FILE = "targets.csv"
TEST_TARGETS_FILE = "test_targets.csv"
CGM_FILE = "cgm.csv"
RUNS_DIR = "runs"
REPORT_DIR = "report"


def _require(path: Path) -> Path:
    if not path.exists():
        raise MissingInput(str(path))
    return path


def _write_json(path: Path, payload: object) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))


def load_split(root: Path) -> DatasetSplit:
    return DatasetSplit.model_validate_json(_require(root / SPLIT_FILE).read_text())


def cmd_cohort(config: RunConfig, root: Path) -> int:
    """Sample the cohort, attach the test fixture, split and standardize."""
    counts = config.cohort.counts
    cohort = sample_cohort(
        config.cohort.distribution, counts, config.cohort.seed, config.cohort.group_parameters
    )
    test = load_reference_cohort(
        _require(config.paths.reference_cohort), config.cohort.group_parameters
    )
    expected = config.cohort.expected_size or sum(counts.values())
    partitions = split(
        cohort, config.cohort.split_ratio, config.cohort.seed, test, expected_size=expected
    )
    stats = StandardizationStats.from_patients(partitions.train)

    root.mkdir(parents=True, exist_ok=True)
    save_patients(cohort, root / COHORT_FILE)
    (root / SPLIT_FILE).write_text(partitions.model_dump_json(indent=1))
    (root / STATS_FILE).write_text(stats.model_dump_json(indent=1))
    logger.info("Cohort written to %s", root)

    table = Table(title="Cohort")
    table.add_column("Group")
    table.add_column("Patients", justify="right")
    for group in AgeGroup:
        table.add_row(group.value, str(sum(p.group == group for p in cohort)))
    table.add_row("train / validation / test", f"{len(partitions.train)} / {len(partitions.validation)} / {len(partitions.test)}")
    console.print(table)
    return EXIT_OK


def cmd_simulate(config: RunConfig, root: Path) -> int:
    """Targets for every (patient, variant, PH) and the pre-meal CGM histories."""
    partitions = load_split(root)
    settings = config.scenario
    named = (
        [("train", p) for p in partitions.train]
        + [("validation", p) for p in partitions.validation]
        + [("test", p) for p in partitions.test]
    )
    target_rows, cgm_rows = [], []
    for partition, patient in named:
        scenario = settings.scenario_for(patient)
        cgm = cgm_history(patient, scenario, settings.dt)
        cgm_rows.append(
            {"patient_id": patient.id, "partition": partition, **{f"cgm_{k}": v for k, v in enumerate(cgm)}}
        )
        for variant in config.model.variants:
            for ph in config.training.phs:
                target_rows.append(
                    {
                        "patient_id": patient.id,
                        "partition": partition,
                        "variant": variant.value,
                        "ph": ph,
                        "bg": simulate_target(patient, scenario, ph, variant, settings.dt),
                    }
                )
    targets = pd.DataFrame(target_rows)
    is_test = targets["partition"] == "test"
    targets[~is_test].to_csv(root / TARGETS_FILE, index=False)
    targets[is_test].to_csv(root / TEST_TARGETS_FILE, index=False)
    pd.DataFrame(cgm_rows).to_csv(root / CGM_FILE, index=False)
    logger.info("Simulated %d targets for %d patients", len(targets), len(named))

    table = Table(title="Targets (mg/dL)")
    for column in ("variant", "PH", "mean", "min", "max"):
        table.add_column(column, justify="right")
    for (variant, ph), bg in targets.groupby(["variant", "ph"])["bg"]:
        table.add_row(variant, str(ph), f"{bg.mean():.1f}", f"{bg.min():.1f}", f"{bg.max():.1f}")
    console.print(table)
    return EXIT_OK


def load_targets(root: Path, cell: MatrixCell) -> dict[str, float]:
    frames = [pd.read_csv(_require(root / name)) for name in (TARGETS_FILE, TEST_TARGETS_FILE)]
    targets = pd.concat(frames)
    rows = targets[(targets["variant"] == cell.variant.value) & (targets["ph"] == cell.ph)]
    return dict(zip(rows["patient_id"], rows["bg"]))


def run_dir(root: Path, cell: MatrixCell) -> Path:
    return root / RUNS_DIR / cell.run_id


def train_cell(cell: MatrixCell, config: RunConfig, root: Path) -> Path:
    """Train one cell and write its checkpoint, logs and manifest."""
    train_config = config.train_config(cell)
    partitions = load_split(root)
    data, _ = prepare_examples(
        partitions, cell.ph, cell.variant, config.scenario, load_targets(root, cell)
    )
    out = run_dir(root, cell)
    out.mkdir(parents=True, exist_ok=True)
    net, log = train(
        train_config,
        data,
        cell.seed,
        settings=config.scenario,
        lint_log_path=out / "lint_log.csv",
    )
    neural.save(net, out / "checkpoint")
    log.to_csv(out / "trainlog.csv")
    _write_json(
        out / "manifest.json",
        {
            "run_id": cell.run_id,
            "seed": cell.seed,
            "cell": cell.model_dump(mode="json"),
            "train_config": train_config.model_dump(mode="json"),
            "config": config.model_dump(mode="json"),
            "best_epoch": log.best_epoch,
            "last_epoch": log.last_epoch,
            "stopped_early": log.stopped_early,
            "accumulation": ACCUMULATION_NOTE,
        },
    )
    logger.info("Trained %s (best epoch %d of %d)", cell.run_id, log.best_epoch, log.last_epoch)
    return out


def eval_cell(cell: MatrixCell, config: RunConfig, root: Path) -> RunReport:
    """Score a trained cell's best checkpoint on the test fixture."""
    out = run_dir(root, cell)
    manifest = json.loads(_require(out / "manifest.json").read_text())
    net = neural.load(_require(out / "checkpoint.npz"))
    train_config = config.train_config(cell)
    data, _ = prepare_examples(
        load_split(root), cell.ph, cell.variant, config.scenario, load_targets(root, cell)
    )
    log = TrainLog(best_epoch=manifest["best_epoch"], stopped_early=manifest["stopped_early"])
    oracle = CounterfactualOracle(cell.variant, cell.ph, train_config.tau, config.scenario)
    report = evaluate_run(net, cell, train_config, data.test, log, oracle)
    report = report.model_copy(update={"last_epoch": manifest["last_epoch"]})
    report.save(out / "report.json")
    return report


def _matrix(
    config: RunConfig, root: Path, step: Callable[[MatrixCell, RunConfig, Path], object]
) -> list[CellOutcome]:
    runner = functools.partial(_call_step, step, config=config, root=root)
    return run_matrix(config.cells(), runner, config.workers)


def _call_step(step, cell: MatrixCell, *, config: RunConfig, root: Path) -> object:
    return step(cell, config, root)


def _outcome_table(title: str, outcomes: Sequence[CellOutcome]) -> Table:
    table = Table(title=title)
    table.add_column("Run")
    table.add_column("Status")
    table.add_column("Detail")
    for outcome in outcomes:
        detail = outcome.error or ""
        if isinstance(outcome.result, RunReport):
            detail = f"RMSE {outcome.result.metrics['rmse']:.2f}, A+B {outcome.result.metrics['ega_ab']:.1f}%"
        table.add_row(outcome.cell.run_id, "ok" if outcome.ok else "[red]failed[/red]", detail)
    return table


def cmd_train(config: RunConfig, root: Path) -> int:
    """Train every cell of the matrix."""
    _require(root / SPLIT_FILE)
    _require(root / TARGETS_FILE)
    outcomes = _matrix(config, root, train_cell)
    console.print(_outcome_table("Training", outcomes))
    return EXIT_OK if all(o.ok for o in outcomes) else EXIT_RUN_FAILURE


def cmd_eval(config: RunConfig, root: Path) -> int:
    """Evaluate every trained cell on the test fixture."""
    _require(root / SPLIT_FILE)
    outcomes = _matrix(config, root, eval_cell)
    console.print(_outcome_table("Evaluation", outcomes))
    return EXIT_OK if all(o.ok for o in outcomes) else EXIT_RUN_FAILURE


def cmd_report(config: RunConfig, root: Path) -> int:
    """Aggregate every evaluated cell of the config into the report directory."""
    reports, lint_logs, missing = [], {}, []
    for cell in config.cells():
        path = run_dir(root, cell) / "report.json"
        if not path.exists():
            missing.append(cell.run_id)
            continue
        reports.append(RunReport.load(path))
        lint_logs[cell.run_id] = run_dir(root, cell) / "lint_log.csv"
    if not reports:
        raise MissingInput(str(root / RUNS_DIR / "*" / "report.json"))
    for run_id in missing:
        logger.warning("No report for %s", run_id)
    emit_report(reports, root / REPORT_DIR, lint_logs)

    aggregate = aggregate_reports(reports)
    table = Table(title="IIT vs standard (mean over seeds)")
    for column in ("variant", "arch", "h", "PH", "RMSE iit", "RMSE std", "Δ", "A+B iit", "A+B std"):
        table.add_column(column, justify="right")
    for row in aggregate.itertuples(index=False):
        table.add_row(
            row.variant,
            row.architecture,
            str(row.hidden_size),
            str(row.ph),
            f"{row.rmse_iit_mean:.2f}",
            f"{row.rmse_standard_mean:.2f}",
            f"{row.rmse_delta:+.2f}",
            f"{row.ega_ab_iit_mean:.1f}",
            f"{row.ega_ab_standard_mean:.1f}",
        )
    console.print(table)
    return EXIT_RUN_FAILURE if missing else EXIT_OK


COMMANDS: dict[str, Callable[[RunConfig, Path], int]] = {
    "cohort": cmd_cohort,
    "simulate": cmd_simulate,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="glucose_iit",
        description="Interchange intervention training of glucose forecasters.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, handler in COMMANDS.items():
        p = sub.add_parser(name, help=(handler.__doc__ or "").strip().split("\n")[0])
        p.add_argument("--config", type=Path, default=None, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="Override cohort and training seeds")
        p.add_argument("--output", type=Path, default=None, help="Output root directory")
        p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return parser


def _setup_logging(level: str) -> None:
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, rich_tracebacks=False, show_path=False)],
        force=True,
    )


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.log_level)
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config = override_seeds(config, [args.seed])
        root = config.output_root(args.output)
        return COMMANDS[args.command](config, root)
    except (ConfigError, MissingInput, WrongCohortSize) as exc:
        logger.error("%s", exc)
        return EXIT_USER_ERROR
    except GlucoseIITError as exc:
        logger.error("Run failed: %s", exc)
        return EXIT_RUN_FAILURE


if __name__ == "__main__":
    sys.exit(main())
