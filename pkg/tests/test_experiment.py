import json
from types import SimpleNamespace

import pytest

from app import experiment
from app.datagen import generate_gaussian_dataset
from app.experiment import (
    ExperimentReport,
    RunResult,
    check_report_consistency,
    plan_jobs,
    run_experiment,
    run_job,
    summarize_rows,
    tune_hyperparameters,
)
from app.errors import DivergenceError
from app.models import ExperimentConfig, Method

from .test_models import EXPERIMENTS_DIR


def tiny_config(**overrides) -> ExperimentConfig:
    data = {
        "name": "tiny",
        "dataset": {"classes": 3, "per_class": 20, "seed": 0},
        "rows": [{"width": 2, "depth": 1}, {"width": 2, "depth": 2}],
        "grid": {"learning_rates": [0.1, 0.03], "epochs": [2, 3]},
        "runs": 2,
        "stochastic_samples": 2,
        "workers": 1,
    }
    data.update(overrides)
    return ExperimentConfig.model_validate(data)


def tiny_data(config):
    spec = config.dataset
    return generate_gaussian_dataset(spec.classes, spec.per_class, spec.seed, spec.mean_bounds, spec.sigma_range)


# lr 1e200 blows the leaf vectors up within a few updates; routing-only training survives it
DIVERGING = {"learning_rates": [1e200], "epochs": [2]}


class TestPlanJobs:
    def test_jobs_cover_rows_methods_and_runs(self):
        jobs = plan_jobs(tiny_config(master_seed=10))
        assert len(jobs) == 2 * 2 * 2
        assert {job.seed for job in jobs} == {10, 11}
        assert jobs == sorted(jobs, key=lambda job: job.sort_key)
        assert [job.method for job in jobs[:4]] == [Method.RDT, Method.RDT, Method.RANDOM_TREE, Method.RANDOM_TREE]


class TestTuning:
    def test_ties_keep_first_grid_point(self, monkeypatch):
        config = tiny_config()
        train_set, _ = tiny_data(config)
        monkeypatch.setattr(
            experiment, "evaluate_accuracy", lambda *args, **kwargs: SimpleNamespace(accuracy=0.5)
        )
        job = plan_jobs(config)[0]
        assert tune_hyperparameters(job, config, train_set) == (0.1, 2, 0.5)

    def test_picks_best_checkpoint(self, monkeypatch):
        config = tiny_config()
        train_set, _ = tiny_data(config)
        calls = []

        def fake_accuracy(*args, **kwargs):
            calls.append(None)
            # third checkpoint scored is lr=0.03 at 2 epochs
            return SimpleNamespace(accuracy=0.9 if len(calls) == 3 else 0.4)

        monkeypatch.setattr(experiment, "evaluate_accuracy", fake_accuracy)
        assert tune_hyperparameters(plan_jobs(config)[0], config, train_set) == (0.03, 2, 0.9)
        assert len(calls) == 4

    def test_diverging_learning_rate_is_skipped(self):
        config = tiny_config(methods=["rdt"], grid={"learning_rates": [1e200, 0.1], "epochs": [2]})
        train_set, _ = tiny_data(config)
        learning_rate, epochs, _ = tune_hyperparameters(plan_jobs(config)[0], config, train_set)
        assert (learning_rate, epochs) == (0.1, 2)

    def test_every_grid_point_diverging(self):
        config = tiny_config(methods=["rdt"], grid=DIVERGING)
        train_set, _ = tiny_data(config)
        with pytest.raises(DivergenceError):
            tune_hyperparameters(plan_jobs(config)[0], config, train_set)


class TestRunJob:
    def test_successful_run(self):
        config = tiny_config()
        train_set, test_set = tiny_data(config)
        for job in plan_jobs(config)[:4:2]:
            result = run_job(job, config, train_set, test_set)
            assert result.ok
            assert set(result.accuracy) == {"greedy", "stochastic"}
            assert result.learning_rate in config.grid.learning_rates
            assert result.epochs in config.grid.epochs
            assert result.covered_classes <= job.width**job.depth
            assert result.accuracy["greedy"] <= result.coverage_upper_bound + 1e-12

    def test_only_configured_eval_modes(self):
        config = tiny_config(eval_modes=["greedy"])
        train_set, test_set = tiny_data(config)
        result = run_job(plan_jobs(config)[0], config, train_set, test_set)
        assert result.ok
        assert set(result.accuracy) == {"greedy"}
        assert result.stochastic_standard_error is None
        assert set(summarize_rows(config, [result])[0]["modes"]) == {"greedy"}

    def test_label_mean_leaves(self):
        config = tiny_config(leaf_init="label_mean")
        job = plan_jobs(config)[0]
        model = experiment.build_model(job, config, 2, 3)
        for vector in model.alpha.values():
            assert vector == pytest.approx([-1 / 3] * 3, abs=config.init_scale)
        random_tree = experiment.build_model(plan_jobs(config)[2], config, 2, 3)
        assert random_tree.alpha_frozen

    def test_failed_run_is_recorded(self):
        config = tiny_config(methods=["rdt"], grid=DIVERGING)
        train_set, test_set = tiny_data(config)
        result = run_job(plan_jobs(config)[0], config, train_set, test_set)
        assert result.status == "failed"
        assert "diverged" in result.error
        record = result.to_record()
        assert record["accuracy"] == {}
        assert "wall_clock_seconds" not in record
        assert "wall_clock_seconds" in result.to_record(record_timings=True)


class TestReport:
    def test_runs_are_deterministic(self):
        config = tiny_config()
        first = run_experiment(config).to_jsonl()
        assert run_experiment(config).to_jsonl() == first

    def test_worker_count_does_not_change_report(self):
        config = tiny_config(runs=1)
        assert run_experiment(config, workers=2).to_jsonl() == run_experiment(config, workers=1).to_jsonl()

    def test_record_layout(self):
        records = run_experiment(tiny_config()).records()
        kinds = [record["kind"] for record in records]
        assert kinds == ["header"] + ["run"] * 8 + ["row"] * 4 + ["check"]
        assert records[-1] == {"kind": "check", "consistent": True, "problems": []}
        assert "workers" not in records[0]
        assert len(records[0]["dataset_sha256"]) == 64

    def test_single_run_has_zero_variance(self):
        report = run_experiment(tiny_config(runs=1))
        for row in report.rows:
            assert row["variance"] == 0.0
            assert row["std"] == 0.0
            assert row["mean"] == row["per_run_accuracy"][0]

    @pytest.mark.parametrize("field", ["mean", "variance", "per_run_accuracy"])
    def test_consistency_check_detects_tampering(self, field):
        records = run_experiment(tiny_config()).records()[:-1]
        row = next(record for record in records if record["kind"] == "row")
        if field == "per_run_accuracy":
            row[field] = [value + 0.1 for value in row[field]]
        else:
            row[field] += 0.1
        assert check_report_consistency(records)

    def test_partial_report_on_failure(self, tmp_path):
        partial = tmp_path / "report.jsonl.partial"
        config = tiny_config(methods=["rdt"], grid=DIVERGING, runs=1, rows=[{"width": 2, "depth": 1}])
        report = run_experiment(config, partial_path=partial)
        assert [run.status for run in report.runs] == ["failed"]
        lines = [json.loads(line) for line in partial.read_text().splitlines()]
        assert lines[1]["status"] == "failed"
        assert report.rows[0]["failed_runs"] == 1
        assert report.rows[0]["mean"] is None
        assert "n/a" in report.render_table()

    def test_write(self, tmp_path):
        report = run_experiment(tiny_config(runs=1))
        table_path = report.write(tmp_path / "report.jsonl")
        assert table_path == tmp_path / "report.md"
        assert (tmp_path / "report.jsonl").read_text() == report.to_jsonl()
        assert table_path.read_text() == report.render_table()


class TestRenderTable:
    def test_table_from_shipped_config(self):
        with open(EXPERIMENTS_DIR / "gaussian16.json") as f:
            config = ExperimentConfig.model_validate(json.load(f))
        results = [
            RunResult(
                job,
                accuracy={"greedy": 0.5 + 0.01 * job.run, "stochastic": 0.4},
                coverage=1.0,
            )
            for job in plan_jobs(config)
        ]
        report = ExperimentReport(config, "0" * 64, results, summarize_rows(config, results))
        lines = report.render_table().splitlines()
        assert "| W | D | L | RDT | Random Trees |" in lines
        cell = "0.52 ± 0.01 (var 0.0002)"
        for width, depth, leaves in [(2, 3, 8), (2, 4, 16), (2, 5, 32), (3, 2, 9), (3, 3, 27)]:
            assert f"| {width} | {depth} | {leaves} | {cell} | {cell} |" in lines
        assert report.records()[-1]["consistent"]
