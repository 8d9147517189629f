from __future__ import annotations

import math

import numpy as np
import pytest

from glucose_iit.alignment import CounterfactualOracle
from glucose_iit.cohort import StandardizationStats
from glucose_iit.errors import EmptySet
from glucose_iit.evaluation import (
    METRICS,
    EgaZone,
    InterventionRow,
    PredictionRow,
    PredictionSet,
    RunReport,
    aggregate_reports,
    compute_metrics,
    ega_share_ab,
    ega_zone,
    emit_report,
    evaluate_run,
    intervention_errors,
    intervention_frame,
    mae,
    metrics_frame,
    mse,
    read_report,
    rmse,
    summarize_interventions,
    zone_shares,
)
from glucose_iit.neural import init
from glucose_iit.simulation import ScenarioSettings
from glucose_iit.training import ExampleSplit, MatrixCell, TrainConfig, TrainLog, make_examples, train

from tests.conftest import make_report

ZONE_TABLE = [
    (100, 100, "A"), (50, 60, "A"), (200, 230, "A"), (300, 250, "A"), (70, 10, "A"),
    (200, 60, "E"), (250, 50, "E"), (60, 200, "E"), (30, 300, "E"), (180, 70, "E"),
    (100, 215, "C"), (150, 20, "C"), (80, 200, "C"), (290, 400, "C"), (170, 50, "C"),
    (250, 120, "D"), (300, 100, "D"), (40, 120, "D"), (65, 100, "D"), (50, 170, "D"),
    (100, 130, "B"), (200, 130, "B"), (300, 200, "B"), (150, 100, "B"), (250, 185, "B"),
]


@pytest.mark.parametrize("ref, pred, zone", ZONE_TABLE)
def test_clarke_zones(ref, pred, zone):
    assert ega_zone(ref, pred) == EgaZone(zone)


def test_every_grid_point_has_a_zone():
    for ref in range(401):
        assert ega_zone(ref, ref) == EgaZone.A
        for pred in range(401):
            assert ega_zone(ref, pred) in EgaZone


def test_negative_glucose_rejected():
    with pytest.raises(ValueError):
        ega_zone(-1.0, 100.0)


def test_metric_examples():
    predictions = PredictionSet.of([100.0, 200.0], [110.0, 170.0])
    assert mse(predictions) == pytest.approx(500.0)
    assert mae(predictions) == pytest.approx(20.0)
    assert rmse(predictions) == pytest.approx(math.sqrt(500.0))


def test_metric_identities_on_random_sets():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 30))
        predictions = PredictionSet.of(rng.uniform(40, 400, n), rng.uniform(0, 400, n))
        assert rmse(predictions) ** 2 == pytest.approx(mse(predictions))
        assert mae(predictions) <= rmse(predictions) + 1e-9
        assert sum(zone_shares(predictions).values()) == pytest.approx(100.0)


def test_empty_set():
    with pytest.raises(EmptySet):
        rmse(PredictionSet.of([], []))


def test_mismatched_lengths():
    with pytest.raises(ValueError):
        PredictionSet.of([1.0, 2.0], [1.0])


def test_share_ab():
    predictions = PredictionSet.of([100, 100, 150, 200], [100, 130, 100, 60])
    assert ega_share_ab(predictions) == pytest.approx(75.0)
    metrics = compute_metrics(predictions)
    assert set(metrics) == set(METRICS)
    assert metrics["zone_e"] == pytest.approx(25.0)


def test_aggregate_mean_sd_and_delta():
    reports = [
        make_report("iit", 0, rmse=10.0, ega_ab=90.0),
        make_report("iit", 1, rmse=12.0, ega_ab=95.0),
        make_report("iit", 2, rmse=14.0, ega_ab=100.0),
        make_report("standard", 0, rmse=13.0, ega_ab=99.0),
        make_report("standard", 1, rmse=15.0, ega_ab=97.0),
    ]
    frame = aggregate_reports(reports)
    assert len(frame) == 1
    row = frame.iloc[0]
    assert row["rmse_iit_mean"] == pytest.approx(12.0)
    assert row["rmse_iit_sd"] == pytest.approx(2.0)
    assert row["rmse_standard_mean"] == pytest.approx(14.0)
    assert row["rmse_standard_sd"] == pytest.approx(math.sqrt(2.0))
    assert row["rmse_delta"] == pytest.approx(row["rmse_iit_mean"] - row["rmse_standard_mean"])
    assert row["rmse_better"] == "iit"
    assert row["ega_ab_delta"] == pytest.approx(-3.0)
    assert row["ega_ab_better"] == "standard"
    assert row["mse_better"] == ""
    assert row["n_runs"] == 5


def test_metrics_frame_is_sorted_by_run():
    frame = metrics_frame([make_report("standard", 1), make_report("iit", 0)])
    assert list(frame["run_id"]) == sorted(frame["run_id"])
    assert {"variant", "architecture", "hidden_size", "ph", "mode", "seed"} <= set(frame.columns)


def report_with_rows(mode: str, seed: int) -> RunReport:
    report = make_report(mode, seed, rmse=10.0 + seed)
    return report.model_copy(
        update={
            "predictions": [
                PredictionRow(patient_id="a", reference=100.0, predicted=105.0, zone=EgaZone.A),
                PredictionRow(patient_id="b", reference=250.0, predicted=60.0, zone=EgaZone.E),
            ],
            "interventions": [
                InterventionRow(module="X4", base_id="a", source_id="b", abs_error=3.0),
                InterventionRow(module="X13", base_id="b", source_id="a", abs_error=1.0),
            ],
        }
    )


def test_emit_report_files(tmp_path):
    reports = [report_with_rows("iit", 0), report_with_rows("standard", 0)]
    written = emit_report(reports, tmp_path)
    names = {p.name for p in written}
    assert {"metrics.csv", "aggregate.csv", "lint_modules.csv", "lint_modules.svg"} <= names
    for report in reports:
        svg = (tmp_path / f"ega_{report.run_id}.svg").read_text()
        assert svg.count('class="zone"') == 5
        assert svg.count("<circle") == 2
    tables = read_report(tmp_path)
    assert len(tables["metrics"]) == 2
    assert len(tables["lint_modules"]) == 4
    assert tables["aggregate"]["rmse_delta"].iloc[0] == pytest.approx(0.0)


def test_emit_report_needs_runs(tmp_path):
    with pytest.raises(EmptySet):
        emit_report([], tmp_path)


def test_emit_report_draws_lint_curves(tmp_path):
    report = report_with_rows("iit", 0)
    log = tmp_path / "lint_log.csv"
    log.write_text("epoch,module,sse,count,mse,rmse,rmse_mgdl\n1,X4,1.0,2,0.5,0.7,70\n2,X4,0.5,2,0.25,0.5,50\n")
    emit_report([report], tmp_path / "report", {report.run_id: log})
    assert (tmp_path / "report" / f"lint_curve_{report.run_id}.svg").exists()


def test_summarize_interventions():
    frame = intervention_frame([report_with_rows("iit", 0), report_with_rows("iit", 1)])
    summary = summarize_interventions(frame)
    x4 = summary[summary["module"] == "X4"].iloc[0]
    assert x4["mean"] == pytest.approx(3.0)
    assert x4["count"] == 2


def test_report_round_trip(tmp_path):
    report = report_with_rows("iit", 0)
    report.save(tmp_path / "report.json")
    assert RunReport.load(tmp_path / "report.json") == report


def test_evaluate_run_end_to_end(amended_examples):
    config = TrainConfig(hidden_size=8, max_epochs=2, early_stop_patience=1)
    data = ExampleSplit(list(amended_examples[:6]), list(amended_examples[6:8]), list(amended_examples[8:12]))
    net, log = train(config, data, seed=0)
    cell = MatrixCell(
        variant=config.variant,
        architecture=config.architecture,
        hidden_size=8,
        ph=config.ph,
        mode=config.mode,
        seed=0,
    )
    report = evaluate_run(net, cell, config, data.test, log)
    assert len(report.predictions) == 4
    assert len(report.interventions) == 2 * 2 * 12
    assert set(report.metrics) == set(METRICS)
    assert all(row.predicted >= 0 for row in report.predictions)
    assert report.best_epoch == log.best_epoch


def test_intervention_errors_are_in_mgdl(amended_examples):
    config = TrainConfig(hidden_size=8, max_epochs=2, early_stop_patience=1)
    oracle = CounterfactualOracle(config.variant, config.ph, config.tau)
    net = init(config.network_spec, 0)
    rows = intervention_errors(net, amended_examples[:2], oracle, config.alignment())
    row = next(r for r in rows if r.module == "X13")
    source = amended_examples[1] if row.base_id == amended_examples[0].patient.id else amended_examples[0]
    expected = abs(config.tau.inverse(net.forward(source.features).prediction) - source.target_bg)
    assert row.abs_error == pytest.approx(expected)


def test_evaluate_run_uses_the_run_scenario(adults):
    settings = ScenarioSettings(cho_grams=90.0)
    config = TrainConfig(hidden_size=8, dropout=0.0)
    stats = StandardizationStats.from_patients(adults)
    test = make_examples(adults[:2], stats, config.ph, config.variant, settings)
    net = init(config.network_spec, 0)
    cell = MatrixCell(
        variant=config.variant,
        architecture=config.architecture,
        hidden_size=8,
        ph=config.ph,
        mode=config.mode,
        seed=0,
    )
    report = evaluate_run(net, cell, config, test, TrainLog(), settings=settings)
    by_id = {e.patient.id: e for e in test}
    for row in (r for r in report.interventions if r.module == "X13"):
        source = by_id[row.source_id]
        expected = abs(config.tau.inverse(net.forward(source.features).prediction) - source.target_bg)
        assert row.abs_error == pytest.approx(expected)
