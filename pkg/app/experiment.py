"""Table reproduction: tune, train and evaluate both methods over several tree shapes.

Every (row, method, run) job is independent and fully determined by the
config and its run seed, so jobs can be spread over worker processes and
the report is byte-identical whatever the worker count.
"""

import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from jinja2 import Environment, FileSystemLoader

from app.baselines import coverage_upper_bound, make_random_tree, train_random_tree
from app.datagen import Dataset, dataset_to_csv, generate_gaussian_dataset, train_validation_split
from app.errors import DivergenceError, RdtError
from app.inference import evaluate_accuracy, leaf_allocation
from app.models import EvalMode, ExperimentConfig, Method, TrainConfig
from app.trainer import train
from app.tree_core import RdtModel, build_complete_tree, init_model
from app.utils.files import PathLike, atomic_write_text

logger = logging.getLogger(__name__)

TEMPLATES_DIR = os.path.join(os.path.dirname(__file__), "templates")
TABLE_TEMPLATE = "report_table.md.j2"
METHOD_TITLES = {Method.RDT: "RDT", Method.RANDOM_TREE: "Random Trees"}
# stochastic test-time routing draws from its own stream of the run seed
EVAL_STREAM = 2


@dataclass(frozen=True)
class ExperimentJob:
    row: int
    width: int
    depth: int
    method: Method
    run: int
    seed: int

    @property
    def sort_key(self) -> Tuple[int, int, int]:
        return (self.row, list(Method).index(self.method), self.run)


@dataclass
class RunResult:
    job: ExperimentJob
    status: str = "ok"
    error: Optional[str] = None
    learning_rate: Optional[float] = None
    epochs: Optional[int] = None
    validation_accuracy: Optional[float] = None
    accuracy: Dict[str, float] = field(default_factory=dict)
    stochastic_standard_error: Optional[float] = None
    covered_classes: Optional[int] = None
    coverage: Optional[float] = None
    coverage_upper_bound: Optional[float] = None
    wall_clock_seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_record(self, record_timings: bool = False) -> Dict[str, Any]:
        record = {
            "kind": "run",
            "width": self.job.width,
            "depth": self.job.depth,
            "leaves": self.job.width**self.job.depth,
            "method": self.job.method.value,
            "run": self.job.run,
            "seed": self.job.seed,
            "status": self.status,
            "error": self.error,
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "validation_accuracy": _clean(self.validation_accuracy),
            "accuracy": {mode: _clean(value) for mode, value in self.accuracy.items()},
            "stochastic_standard_error": _clean(self.stochastic_standard_error),
            "covered_classes": self.covered_classes,
            "coverage": _clean(self.coverage),
            "coverage_upper_bound": _clean(self.coverage_upper_bound),
        }
        if record_timings:
            record["wall_clock_seconds"] = self.wall_clock_seconds
        return record


def _clean(value: Optional[float]) -> Optional[float]:
    """NaN and missing values are written as JSON null."""
    if value is None or math.isnan(value):
        return None
    return float(value)


def plan_jobs(config: ExperimentConfig) -> List[ExperimentJob]:
    return [
        ExperimentJob(row, shape.width, shape.depth, method, run, config.master_seed + run)
        for row, shape in enumerate(config.rows)
        for method in config.methods
        for run in range(config.runs)
    ]


def build_model(job: ExperimentJob, config: ExperimentConfig, input_dim: int, num_classes: int) -> RdtModel:
    topology = build_complete_tree(job.width, job.depth)
    if job.method is Method.RANDOM_TREE:
        return make_random_tree(topology, input_dim, num_classes, config.init_scale, job.seed)
    return init_model(topology, input_dim, num_classes, config.init_scale, job.seed, config.leaf_init)


def _fit(model: RdtModel, job: ExperimentJob, data: Dataset, cfg: TrainConfig, on_epoch_end=None) -> None:
    if job.method is Method.RANDOM_TREE:
        train_random_tree(model, data, cfg, on_epoch_end=on_epoch_end)
    else:
        train(model, data, cfg, on_epoch_end=on_epoch_end)


def tune_hyperparameters(
    job: ExperimentJob, config: ExperimentConfig, train_set: Dataset
) -> Tuple[float, int, float]:
    """Pick (learning rate, epochs) by greedy accuracy on a held-out part of the training set.

    One training per learning rate runs to the largest epoch budget; smaller
    budgets are scored at their checkpoint, which matches a separate run since
    the training stream is a prefix of the longer one. Ties keep the first
    candidate in grid order.
    """
    grid = config.grid
    fit_set, validation_set = train_validation_split(train_set, grid.validation_fraction, job.seed)
    budget = max(grid.epochs)
    checkpoints = set(grid.epochs)

    best: Optional[Tuple[float, int, float]] = None
    for learning_rate in grid.learning_rates:
        scores: Dict[int, float] = {}

        def score(epoch: int, model: RdtModel) -> None:
            if epoch in checkpoints:
                scores[epoch] = evaluate_accuracy(model, validation_set, EvalMode.GREEDY).accuracy

        model = build_model(job, config, train_set.input_dim, train_set.num_classes)
        cfg = config.train.model_copy(
            update={"learning_rate": learning_rate, "epochs": budget, "seed": job.seed}
        )
        try:
            _fit(model, job, fit_set, cfg, on_epoch_end=score)
        except DivergenceError as e:
            logger.warning("lr=%g diverged while tuning %s: %s", learning_rate, job, e)

        for epochs in grid.epochs:
            if epochs in scores and (best is None or scores[epochs] > best[2]):
                best = (learning_rate, epochs, scores[epochs])

    if best is None:
        raise DivergenceError("Every grid point diverged during tuning")
    return best


def run_job(job: ExperimentJob, config: ExperimentConfig, train_set: Dataset, test_set: Dataset) -> RunResult:
    """Tune, retrain on the full training set and evaluate on the test set."""
    result = RunResult(job)
    started = time.perf_counter()
    try:
        learning_rate, epochs, validation_accuracy = tune_hyperparameters(job, config, train_set)
        result.learning_rate, result.epochs = learning_rate, epochs
        result.validation_accuracy = validation_accuracy

        model = build_model(job, config, train_set.input_dim, train_set.num_classes)
        cfg = config.train.model_copy(
            update={"learning_rate": learning_rate, "epochs": epochs, "seed": job.seed}
        )
        _fit(model, job, train_set, cfg)

        for mode in config.eval_modes:
            if mode is EvalMode.GREEDY:
                evaluation = evaluate_accuracy(model, test_set, mode)
            else:
                rng = np.random.default_rng([job.seed, EVAL_STREAM])
                evaluation = evaluate_accuracy(model, test_set, mode, rng, config.stochastic_samples)
                result.stochastic_standard_error = evaluation.standard_error
            result.accuracy[mode.value] = evaluation.accuracy

        allocation = leaf_allocation(model)
        result.covered_classes = len(allocation.covered_classes)
        result.coverage = allocation.coverage
        result.coverage_upper_bound = coverage_upper_bound(model, test_set)
    except RdtError as e:
        logger.error("Run %s failed: %s", job, e)
        result.status = "failed"
        result.error = str(e)
    result.wall_clock_seconds = time.perf_counter() - started
    logger.info(
        "W=%d D=%d %s run %d: %s %s",
        job.width, job.depth, job.method.value, job.run, result.status, result.accuracy,
    )
    return result


def _spread(values: List[float]) -> Dict[str, Optional[float]]:
    if not values:
        return {"mean": None, "variance": None, "std": None}
    variance = float(np.var(values))
    return {"mean": float(np.mean(values)), "variance": variance, "std": math.sqrt(variance)}


def summarize_rows(config: ExperimentConfig, results: List[RunResult]) -> List[Dict[str, Any]]:
    """One record per (row, method): accuracy spread over runs (population variance)."""
    primary = config.eval_modes[0].value
    records = []
    for row, shape in enumerate(config.rows):
        for method in config.methods:
            runs = [r for r in results if r.job.row == row and r.job.method is method]
            succeeded = [r for r in runs if r.ok]
            per_run = [r.accuracy[primary] for r in succeeded]
            record = {
                "kind": "row",
                "width": shape.width,
                "depth": shape.depth,
                "leaves": shape.leaves,
                "method": method.value,
                "mode": primary,
                "per_run_accuracy": per_run,
                "failed_runs": len(runs) - len(succeeded),
                "modes": {
                    mode.value: _spread([r.accuracy[mode.value] for r in succeeded])
                    for mode in config.eval_modes
                },
                "mean_coverage": _spread([r.coverage for r in succeeded])["mean"],
            }
            record.update(_spread(per_run))
            records.append(record)
    return records


def check_report_consistency(records: List[Dict[str, Any]], tolerance: float = 1e-9) -> List[str]:
    """Recompute every row statistic from its runs; returns the mismatches found."""
    problems = []
    runs = [r for r in records if r.get("kind") == "run"]
    for row in (r for r in records if r.get("kind") == "row"):
        label = f"W={row['width']} D={row['depth']} {row['method']}"
        expected = [
            r["accuracy"][row["mode"]]
            for r in runs
            if (r["width"], r["depth"], r["method"]) == (row["width"], row["depth"], row["method"])
            and r["status"] == "ok"
        ]
        if expected != row["per_run_accuracy"]:
            problems.append(f"{label}: per-run accuracies do not match the run records")
        stats = _spread(row["per_run_accuracy"])
        for key, value in stats.items():
            reported = row.get(key)
            if value is None or reported is None:
                if value is not reported:
                    problems.append(f"{label}: {key} is {reported}, expected {value}")
            elif not math.isclose(value, reported, rel_tol=tolerance, abs_tol=tolerance):
                problems.append(f"{label}: {key} is {reported}, expected {value}")
    return problems


def _cell(row: Dict[str, Any]) -> str:
    if row["mean"] is None:
        return "n/a"
    text = f"{row['mean']:.2f} ± {row['std']:.2f} (var {row['variance']:.4f})"
    if row["failed_runs"]:
        text += f" [{row['failed_runs']} failed]"
    return text


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    dataset_fingerprint: str
    runs: List[RunResult]
    rows: List[Dict[str, Any]]

    def header(self) -> Dict[str, Any]:
        config = self.config
        return {
            "kind": "header",
            "name": config.name,
            "dataset": config.dataset.model_dump(mode="json"),
            "dataset_sha256": self.dataset_fingerprint,
            "train": config.train.model_dump(mode="json", exclude={"learning_rate", "epochs", "seed"}),
            "grid": config.grid.model_dump(mode="json"),
            "init_scale": config.init_scale,
            "leaf_init": config.leaf_init.value,
            "runs": config.runs,
            "master_seed": config.master_seed,
            "methods": [method.value for method in config.methods],
            "eval_modes": [mode.value for mode in config.eval_modes],
            "stochastic_samples": config.stochastic_samples,
        }

    def records(self) -> List[Dict[str, Any]]:
        records = [self.header()]
        records += [run.to_record(self.config.record_timings) for run in self.runs]
        records += self.rows
        problems = check_report_consistency(records)
        records.append({"kind": "check", "consistent": not problems, "problems": problems})
        return records

    def to_jsonl(self) -> str:
        return "".join(json.dumps(record, sort_keys=True) + "\n" for record in self.records())

    def render_table(self, templates_dir: str = TEMPLATES_DIR) -> str:
        env = Environment(loader=FileSystemLoader(templates_dir), keep_trailing_newline=True)
        per_row = len(self.config.methods)
        table_rows = []
        # summarize_rows emits the methods of one shape consecutively
        for row, shape in enumerate(self.config.rows):
            cells = [_cell(record) for record in self.rows[row * per_row:(row + 1) * per_row]]
            table_rows.append(
                {"width": shape.width, "depth": shape.depth, "leaves": shape.leaves, "cells": cells}
            )
        return env.get_template(TABLE_TEMPLATE).render(
            name=self.config.name,
            dataset=self.config.dataset,
            loss=self.config.train.loss.value,
            mode=self.config.eval_modes[0].value,
            runs=self.config.runs,
            titles=[METHOD_TITLES[method] for method in self.config.methods],
            table_rows=table_rows,
        )

    def write(self, out_path: PathLike) -> Path:
        """Write the JSON Lines report and the markdown table next to it."""
        out_path = Path(out_path)
        atomic_write_text(out_path, self.to_jsonl())
        table_path = out_path.with_suffix(".md")
        atomic_write_text(table_path, self.render_table())
        return table_path


def dataset_fingerprint(train_set: Dataset, test_set: Dataset) -> str:
    digest = hashlib.sha256()
    digest.update(dataset_to_csv(train_set).encode())
    digest.update(dataset_to_csv(test_set).encode())
    return digest.hexdigest()


def run_experiment(
    config: ExperimentConfig,
    workers: Optional[int] = None,
    partial_path: Optional[PathLike] = None,
) -> ExperimentReport:
    """Run every job of the config; a failed run is recorded and flushed to partial_path."""
    spec = config.dataset
    train_set, test_set = generate_gaussian_dataset(
        spec.classes, spec.per_class, spec.seed, spec.mean_bounds, spec.sigma_range
    )
    fingerprint = dataset_fingerprint(train_set, test_set)
    jobs = plan_jobs(config)
    workers = workers or config.workers
    logger.info("Running %d jobs of '%s' on %d worker(s)", len(jobs), config.name, workers)

    results: List[RunResult] = []

    def collect(result: RunResult) -> None:
        results.append(result)
        if not result.ok and partial_path is not None:
            ordered = sorted(results, key=lambda r: r.job.sort_key)
            partial = ExperimentReport(config, fingerprint, ordered, summarize_rows(config, ordered))
            atomic_write_text(partial_path, partial.to_jsonl())
            logger.warning("Run failed; partial report written to %s", partial_path)

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_job, job, config, train_set, test_set) for job in jobs]
            for future in as_completed(futures):
                collect(future.result())
    else:
        for job in jobs:
            collect(run_job(job, config, train_set, test_set))

    results.sort(key=lambda r: r.job.sort_key)
    return ExperimentReport(config, fingerprint, results, summarize_rows(config, results))


def load_experiment_config(path: PathLike) -> Tuple[Optional[ExperimentConfig], Dict[str, str], List[str]]:
    """Read a JSON experiment config; validation problems are returned, not raised."""
    with open(path) as config_file:
        data = json.load(config_file)
    return ExperimentConfig.create_and_validate(data)
