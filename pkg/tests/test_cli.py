from __future__ import annotations

import json

import pandas as pd
import pytest

from glucose_iit.cli import main
from glucose_iit.cohort import AgeGroup, load_patients

from tests.conftest import REFERENCE_COHORT


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(
        json.dumps(
            {
                "cohort": {"counts": {"child": 0, "adolescent": 0, "adult": 5}, "seed": 0},
                "model": {"hidden_sizes": [8]},
                "training": {"max_epochs": 2, "early_stop_patience": 1, "phs": [30], "seeds": [0]},
                "paths": {"reference_cohort": str(REFERENCE_COHORT)},
            }
        )
    )
    return path


def run(config_path, out, *commands, seed=None):
    extra = ["--seed", str(seed)] if seed is not None else []
    return [main([command, "--config", str(config_path), "--output", str(out), *extra]) for command in commands]


def test_cohort_with_custom_counts(config_path, tmp_path):
    out = tmp_path / "out"
    assert run(config_path, out, "cohort") == [0]
    cohort = load_patients(out / "cohort.json")
    assert len(cohort) == 5
    assert all(p.group == AgeGroup.ADULT for p in cohort)
    split = json.loads((out / "split.json").read_text())
    assert (len(split["train"]), len(split["validation"]), len(split["test"])) == (4, 1, 30)


def test_cohort_is_reproducible_per_seed(config_path, tmp_path):
    run(config_path, tmp_path / "a", "cohort", seed=3)
    run(config_path, tmp_path / "b", "cohort", seed=3)
    run(config_path, tmp_path / "c", "cohort", seed=4)
    first = (tmp_path / "a" / "cohort.json").read_bytes()
    assert first == (tmp_path / "b" / "cohort.json").read_bytes()
    assert first != (tmp_path / "c" / "cohort.json").read_bytes()


def test_simulate_writes_targets(config_path, tmp_path):
    out = tmp_path / "out"
    assert run(config_path, out, "cohort", "simulate") == [0, 0]
    targets = pd.read_csv(out / "targets.csv")
    test_targets = pd.read_csv(out / "test_targets.csv")
    assert len(targets) == 5
    assert len(test_targets) == 30
    assert set(targets["partition"]) == {"train", "validation"}
    assert len(pd.read_csv(out / "cgm.csv")) == 35


def test_bad_config_exits_with_user_error(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"training": {"learning_rate": 0.1}}))
    assert main(["cohort", "--config", str(path), "--output", str(tmp_path)]) == 1
    assert main(["cohort", "--config", str(tmp_path / "missing.json")]) == 1


def test_missing_upstream_output(config_path, tmp_path):
    assert run(config_path, tmp_path / "empty", "simulate") == [1]
    assert run(config_path, tmp_path / "empty", "report") == [1]


def test_eval_before_train_fails_cells(config_path, tmp_path):
    out = tmp_path / "out"
    run(config_path, out, "cohort", "simulate")
    assert run(config_path, out, "eval") == [2]


def test_full_pipeline_is_deterministic(config_path, tmp_path):
    steps = ("cohort", "simulate", "train", "eval", "report")
    for name in ("a", "b"):
        assert run(config_path, tmp_path / name, *steps) == [0] * len(steps)
    report = tmp_path / "a" / "report"
    for name in ("metrics.csv", "aggregate.csv", "lint_modules.csv", "lint_modules.svg"):
        assert (report / name).exists()
    metrics = pd.read_csv(report / "metrics.csv")
    assert sorted(metrics["mode"]) == ["iit", "standard"]
    for run_id in metrics["run_id"]:
        assert (report / f"ega_{run_id}.svg").exists()
        run_files = tmp_path / "a" / "runs" / run_id
        for name in ("checkpoint.npz", "checkpoint.json", "trainlog.csv", "lint_log.csv", "manifest.json", "report.json"):
            assert (run_files / name).exists()
    assert (report / "metrics.csv").read_bytes() == (tmp_path / "b" / "report" / "metrics.csv").read_bytes()


def test_unsamplable_distribution_is_a_run_failure(config_path, tmp_path):
    settings = json.loads(config_path.read_text())
    settings["cohort"]["distribution"] = {
        "entries": {
            name: {"adult": {"mean": -1e6, "sd": 1.0}}
            for name in ("x4", "x5", "x6", "x8", "x9", "x10", "x11", "x12", "x13")
        }
    }
    config_path.write_text(json.dumps(settings))
    assert run(config_path, tmp_path / "out", "cohort") == [2]
