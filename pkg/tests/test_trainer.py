import logging
import math

import numpy as np
import pytest
from pydantic import ValidationError

from app.datagen import Dataset
from app.errors import DimensionMismatchError, DivergenceError, ParameterDomainError
from app.inference import path_probability_matrix
from app.losses import get_loss, label_vector, square_loss
from app.models import LeafInit, SamplingMode, TrainConfig
from app.trainer import (
    ModelGradient,
    RunningBaseline,
    TrainLog,
    dataset_objective,
    estimate_objective,
    exact_gradient,
    sample_gradient,
    train,
    train_step,
)
from app.tree_core import build_complete_tree, init_model, parameter_vector, with_parameter_vector


def random_instance(seed):
    """Small random model and dataset: W in {2,3}, D <= 3, C <= 8, n = 2, N <= 20."""
    generator = np.random.default_rng(seed)
    width = int(generator.choice([2, 3]))
    depth = int(generator.integers(1, 4))
    num_classes = int(generator.integers(2, 9))
    count = int(generator.integers(1, 21))
    model = init_model(build_complete_tree(width, depth), 2, num_classes, init_scale=1.0, seed=seed)
    X = generator.uniform(-1.0, 1.0, size=(count, 2))
    labels = generator.integers(0, num_classes, size=count)
    return model, Dataset(X, labels, num_classes, "train")


def numeric_gradient(model, dataset, loss, step=1e-5):
    base = parameter_vector(model)
    numeric = np.zeros_like(base)
    for k in range(base.size):
        plus, minus = base.copy(), base.copy()
        plus[k] += step
        minus[k] -= step
        numeric[k] = (
            dataset_objective(with_parameter_vector(model, plus), dataset, loss)
            - dataset_objective(with_parameter_vector(model, minus), dataset, loss)
        ) / (2 * step)
    return numeric


def away_from_hinge_kinks(model, tolerance=1e-3):
    """Spread leaf scores over [-1.5, 1.5] while keeping every |score| clear of 1."""
    for leaf, vector in model.alpha.items():
        scaled = 1.5 * vector
        scaled[np.abs(np.abs(scaled) - 1.0) < tolerance] *= 0.9
        model.alpha[leaf] = scaled


class TestExactGradient:
    @pytest.mark.parametrize("seed", range(100), ids=[f"instance_{s}" for s in range(100)])
    def test_matches_finite_differences(self, seed):
        model, dataset = random_instance(seed)
        loss = "square" if seed % 2 == 0 else "hinge"
        if loss == "hinge":
            away_from_hinge_kinks(model)
        analytic = exact_gradient(model, dataset, loss).vector()
        np.testing.assert_allclose(analytic, numeric_gradient(model, dataset, loss), rtol=1e-4, atol=1e-7)

    def test_identical_leaves_give_zero_routing_gradient(self, small_model, random_dataset):
        for leaf in small_model.alpha:
            small_model.alpha[leaf] = np.array([0.2, -0.4, 0.1, 0.0])
        gradient = exact_gradient(small_model, random_dataset(10, 4, seed=1))
        for block in gradient.theta.values():
            np.testing.assert_allclose(block, 0.0, atol=1e-12)

    def test_unreachable_leaf_has_zero_gradient(self, small_model, random_dataset):
        small_model.theta[0][:, :-1] = 0.0
        small_model.theta[0][:, -1] = [800.0, -800.0]
        gradient = exact_gradient(small_model, random_dataset(10, 4, seed=2))
        for leaf in (5, 6):
            np.testing.assert_array_equal(gradient.alpha[leaf], np.zeros(4))

    def test_dataset_objective_matches_mean_of_paths(self, small_model, random_dataset):
        dataset = random_dataset(8, 4, seed=3)
        loss = get_loss("square")
        reach = path_probability_matrix(small_model, dataset.X)
        expected = np.mean(
            [
                sum(p * loss.value(small_model.alpha[leaf], y) for p, leaf in zip(row, small_model.topology.leaves))
                for row, y in zip(reach, dataset.label_vectors())
            ]
        )
        assert dataset_objective(small_model, dataset) == pytest.approx(expected, rel=1e-12)


class TestSampleGradient:
    def test_does_not_mutate_model(self, small_model, rng):
        before = small_model.copy()
        sample_gradient(small_model, [0.1, 0.2], 1, "square", rng)
        assert small_model == before

    def test_touches_only_the_sampled_path(self, small_model, rng):
        sample = sample_gradient(small_model, [0.1, 0.2], 1, "square", rng)
        assert set(sample.gradient.theta) == set(sample.trajectory.nodes[:-1])
        assert set(sample.gradient.alpha) == {sample.trajectory.leaf}

    def test_unbiased(self, small_model, random_dataset):
        dataset = random_dataset(4, 4, seed=5)
        exact = exact_gradient(small_model, dataset).vector()
        generator = np.random.default_rng(17)
        labels = dataset.label_vectors()
        draws = []
        for _ in range(10_000):
            total = ModelGradient.zeros_like(small_model)
            for x, y in zip(dataset.X, labels):
                total.add_(sample_gradient(small_model, x, y, "square", generator).gradient, 1.0 / len(dataset))
            draws.append(total.vector())
        draws = np.array(draws)
        standard_error = draws.std(axis=0) / math.sqrt(len(draws))
        assert np.all(np.abs(draws.mean(axis=0) - exact) <= 5 * standard_error + 1e-12)


class TestTrainStep:
    def test_zero_step_changes_nothing(self, small_model, rng):
        cfg = TrainConfig.model_construct(learning_rate=0.0)
        before = small_model.copy()
        train_step(small_model, [0.3, 0.3], 2, cfg, rng)
        assert small_model == before

    def test_frozen_leaves_untouched(self, small_model, rng):
        small_model.alpha_frozen = True
        before = {leaf: vector.copy() for leaf, vector in small_model.alpha.items()}
        cfg = TrainConfig(learning_rate=0.5)
        for _ in range(200):
            train_step(small_model, rng.normal(size=2), int(rng.integers(4)), cfg, rng)
        for leaf, vector in before.items():
            np.testing.assert_array_equal(small_model.alpha[leaf], vector)

    def test_contributions_share_parameters(self, small_model):
        cfg = TrainConfig(learning_rate=0.2, trajectories_per_example=3)
        x, y = np.array([0.4, -0.1]), label_vector(3, 4)
        reference = small_model.copy()
        generator = np.random.default_rng(42)
        samples = [sample_gradient(reference, x, y, "square", generator) for _ in range(3)]
        expected = ModelGradient.zeros_like(reference)
        for sample in samples:
            expected.add_(sample.gradient)
        mean_loss = train_step(small_model, x, y, cfg, np.random.default_rng(42))
        assert mean_loss == pytest.approx(np.mean([s.loss for s in samples]))
        np.testing.assert_allclose(
            parameter_vector(small_model),
            parameter_vector(reference) - (0.2 / 3) * expected.vector(),
            rtol=1e-12,
            atol=1e-15,
        )

    def test_expected_routing_update_follows_exact_gradient(self):
        model = init_model(build_complete_tree(2, 1), 2, 3, init_scale=0.5, seed=9)
        y = label_vector(1, 3)
        model.alpha[1] = y.copy()
        x = np.array([0.6, -0.4])
        exact = exact_gradient(model, Dataset(x[np.newaxis, :], [1], 3, "train")).theta[0]
        cfg = TrainConfig(learning_rate=1e-6)
        generator = np.random.default_rng(0)
        update = np.zeros_like(exact)
        for _ in range(10_000):
            trial = model.copy()
            train_step(trial, x, y, cfg, generator)
            update += (model.theta[0] - trial.theta[0]) / cfg.learning_rate
        cosine = np.sum(update * exact) / (np.linalg.norm(update) * np.linalg.norm(exact))
        assert cosine > 0.99

    def test_divergence_reports_epoch(self, small_model, random_dataset):
        cfg = TrainConfig(learning_rate=1e200, epochs=3)
        with pytest.raises(DivergenceError) as excinfo:
            train(small_model, random_dataset(10, 4), cfg)
        assert excinfo.value.epoch is not None
        assert "epoch" in str(excinfo.value)

    def test_running_baseline(self):
        baseline = RunningBaseline()
        for value in (2.0, 4.0, 6.0):
            baseline.update(value)
        assert baseline.value == pytest.approx(4.0)
        assert baseline.count == 3


class TestTrain:
    def test_log_lengths(self, small_model, random_dataset):
        log = train(small_model, random_dataset(20, 4), TrainConfig(epochs=7), random_dataset(10, 4, seed=1))
        assert log.epochs == 7
        assert len(log.train_accuracy) == len(log.test_accuracy) == 7
        assert log.theta_norm > 0 and log.alpha_norm > 0

    def test_reproducible(self, random_dataset):
        topo = build_complete_tree(2, 3)
        train_set, eval_set = random_dataset(30, 4, seed=1), random_dataset(10, 4, seed=2)
        cfg = TrainConfig(epochs=5, seed=13, learning_rate=0.05)
        first, second = init_model(topo, 2, 4, seed=3), init_model(topo, 2, 4, seed=3)
        assert train(first, train_set, cfg, eval_set) == train(second, train_set, cfg, eval_set)
        assert first == second

    def test_epochs_replay_train_step(self, random_dataset):
        dataset = random_dataset(12, 4)
        cfg = TrainConfig(
            epochs=2, seed=5, learning_rate=0.05, baseline_enabled=True, trajectories_per_example=2
        )
        topo = build_complete_tree(3, 2)
        trained, manual = init_model(topo, 2, 4, seed=1), init_model(topo, 2, 4, seed=1)
        train(trained, dataset, cfg)
        rng = np.random.default_rng(cfg.seed)
        baseline = RunningBaseline()
        labels = dataset.label_vectors()
        for epoch in (1, 2):
            for i in rng.permutation(len(dataset)):
                train_step(manual, dataset.X[i], labels[i], cfg, rng, baseline, epoch)
        assert trained == manual

    @pytest.mark.parametrize("sampling", list(SamplingMode))
    def test_policy_evaluation_count(self, random_dataset, sampling):
        model = init_model(build_complete_tree(3, 2), 2, 4)
        cfg = TrainConfig(epochs=4, trajectories_per_example=2, sampling=sampling)
        log = train(model, random_dataset(15, 4), cfg)
        assert log.policy_evaluations == 4 * 15 * 2 * 2

    def test_missing_eval_set_logs_nan(self, small_model, random_dataset):
        log = train(small_model, random_dataset(5, 4), TrainConfig(epochs=2))
        assert all(math.isnan(value) for value in log.test_accuracy)

    def test_two_separable_clusters(self, two_clusters):
        cfg = TrainConfig(learning_rate=0.1, epochs=100)
        successes = 0
        for seed in range(5):
            model = init_model(build_complete_tree(2, 1), 2, 2, seed=seed)
            log = train(model, two_clusters(seed), cfg.model_copy(update={"seed": seed}))
            successes += log.train_accuracy[-1] >= 0.95
        assert successes >= 4

    def test_progress_lines(self, small_model, random_dataset, caplog):
        with caplog.at_level(logging.INFO, logger="app.trainer"):
            train(small_model, random_dataset(5, 4), TrainConfig(epochs=4, log_every=2))
        lines = [r.getMessage() for r in caplog.records if r.name == "app.trainer"]
        assert len(lines) == 2
        assert lines[0].startswith("epoch 2/4")

    def test_empty_training_set(self, small_model):
        empty = Dataset(np.zeros((0, 2)), np.zeros(0, dtype=int), 4, "train")
        with pytest.raises(ParameterDomainError):
            train(small_model, empty, TrainConfig())

    def test_dimension_mismatch(self, small_model, random_dataset):
        with pytest.raises(DimensionMismatchError):
            train(small_model, random_dataset(5, 3), TrainConfig())

    @pytest.mark.parametrize(
        "field, value",
        [("epochs", 0), ("learning_rate", 0.0), ("learning_rate", -1.0), ("trajectories_per_example", 0)],
    )
    def test_config_preconditions(self, field, value):
        with pytest.raises(ValidationError):
            TrainConfig(**{field: value})


class TestTrainLogCsv:
    def test_layout(self, tmp_path):
        log = TrainLog(train_loss=[1.5, 0.25], train_accuracy=[0.5, 0.75], test_accuracy=[float("nan"), 0.5])
        path = tmp_path / "run.log.csv"
        log.save_csv(path)
        assert path.read_text().splitlines() == [
            "epoch,train_loss,train_acc,test_acc",
            "1,1.5,0.5,",
            "2,0.25,0.75,0.5",
        ]


class TestEstimateObjective:
    def test_identical_leaves(self, small_model, random_dataset, rng):
        shared = np.array([0.5, -0.5, 0.0, 0.25])
        for leaf in small_model.alpha:
            small_model.alpha[leaf] = shared.copy()
        dataset = random_dataset(12, 4, seed=4)
        loss = get_loss("square")
        expected = np.mean([loss.value(shared, y) for y in dataset.label_vectors()])
        assert estimate_objective(small_model, dataset, 3, rng) == pytest.approx(expected, rel=1e-12)

    def test_agrees_with_enumeration(self, small_model, random_dataset, rng):
        dataset = random_dataset(5, 4, seed=6)
        samples = 4000
        loss = get_loss("square")
        reach = path_probability_matrix(small_model, dataset.X)
        table = loss.table(np.stack([small_model.alpha[leaf] for leaf in small_model.topology.leaves]), dataset.label_vectors())
        per_example_variance = np.sum(reach * table**2, axis=1) - np.sum(reach * table, axis=1) ** 2
        standard_error = math.sqrt(per_example_variance.sum() / (len(dataset) ** 2 * samples))
        estimate = estimate_objective(small_model, dataset, samples, rng)
        assert abs(estimate - dataset_objective(small_model, dataset)) <= 3 * standard_error
        assert estimate >= 0.0

    def test_rejects_zero_samples(self, small_model, random_dataset, rng):
        with pytest.raises(ParameterDomainError):
            estimate_objective(small_model, random_dataset(3, 4), 0, rng)


class TestLeafInitialisation:
    @pytest.mark.parametrize(
        "leaf_init, visited_is_cheaper", [(LeafInit.UNIFORM, True), (LeafInit.LABEL_MEAN, False)]
    )
    def test_one_visit_and_the_other_classes(self, leaf_init, visited_is_cheaper):
        model = init_model(build_complete_tree(2, 1), 2, 16, init_scale=1e-3, seed=0, leaf_init=leaf_init)
        model.theta[0][:, -1] = [50.0, -50.0]
        train_step(model, [0.0, 0.0], 0, TrainConfig(learning_rate=0.1), np.random.default_rng(0))
        own, other = label_vector(0, 16), label_vector(5, 16)
        assert square_loss(model.alpha[1], own) < square_loss(model.alpha[2], own)
        # leaf 1 was visited by class 0 only; leaf 2 is untouched
        assert (square_loss(model.alpha[1], other) < square_loss(model.alpha[2], other)) is visited_is_cheaper

        model.theta[0][:] = 0.0
        grad = exact_gradient(model, Dataset(np.zeros((1, 2)), np.array([5]), 16, "train")).theta[0]
        # descent raises the bias of the cheaper child
        assert bool(grad[0, -1] < grad[1, -1]) is visited_is_cheaper
