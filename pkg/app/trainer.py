"""Stochastic policy-gradient training of routing blocks and leaf scores.

Each sampled trajectory contributes two terms: the score-function term
grad log P(H|x) * loss, which only touches the routing blocks on the path,
and the pathwise term grad_alpha loss, which only touches the reached leaf.
`exact_gradient` computes the expectation of both terms by enumerating
every path and exists to verify the sampled estimator.
"""

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np

from app.errors import DimensionMismatchError, DivergenceError, ParameterDomainError
from app.inference import check_enumerable, enumerate_paths, evaluate_accuracy, path_probability_matrix
from app.losses import Loss, as_label_vector, get_loss
from app.models import EvalMode, LossName, SamplingMode, TrainConfig
from app.routing_policy import check_input, child_distribution, child_scores, draw_index, softmax
from app.tree_core import RdtModel, Trajectory, parameter_norms
from app.utils.files import PathLike, atomic_write_text

if TYPE_CHECKING:
    from app.datagen import Dataset

logger = logging.getLogger(__name__)

EpochCallback = Callable[[int, RdtModel], None]


@dataclass(eq=False)
class ModelGradient:
    """Gradient blocks keyed like the model's theta and alpha maps."""

    theta: Dict[int, np.ndarray]
    alpha: Dict[int, np.ndarray]

    @classmethod
    def zeros_like(cls, model: RdtModel) -> "ModelGradient":
        return cls(
            theta={node: np.zeros_like(block) for node, block in model.theta.items()},
            alpha={node: np.zeros_like(vector) for node, vector in model.alpha.items()},
        )

    def add_(self, other: "ModelGradient", scale: float = 1.0) -> "ModelGradient":
        for node, block in other.theta.items():
            self.theta[node] += scale * block
        for node, vector in other.alpha.items():
            self.alpha[node] += scale * vector
        return self

    def vector(self) -> np.ndarray:
        """Same layout as tree_core.parameter_vector."""
        parts = [self.theta[node].ravel() for node in sorted(self.theta)]
        parts += [self.alpha[node] for node in sorted(self.alpha)]
        return np.concatenate(parts)


class GradientSample(NamedTuple):
    gradient: ModelGradient
    loss: float
    trajectory: Trajectory


@dataclass
class RunningBaseline:
    """Running mean of observed losses, subtracted in the routing update."""

    value: float = 0.0
    count: int = 0

    def update(self, loss: float) -> None:
        self.count += 1
        self.value += (loss - self.value) / self.count


@dataclass
class TrainLog:
    train_loss: List[float] = field(default_factory=list)
    train_accuracy: List[float] = field(default_factory=list)
    test_accuracy: List[float] = field(default_factory=list)
    theta_norm: float = 0.0
    alpha_norm: float = 0.0
    policy_evaluations: int = 0

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "train_acc", "test_acc"])
        for epoch, row in enumerate(
            zip(self.train_loss, self.train_accuracy, self.test_accuracy), start=1
        ):
            writer.writerow([epoch] + ["" if math.isnan(v) else repr(v) for v in row])
        return buffer.getvalue()

    def save_csv(self, path: PathLike) -> None:
        atomic_write_text(path, self.to_csv())


def _sample_path(
    model: RdtModel, x: np.ndarray, rng: np.random.Generator
) -> Tuple[int, List[Tuple[int, int, np.ndarray]]]:
    """Sampled walk for an already checked input: the leaf and (node, child index, probs) per step."""
    children = model.topology.children
    node, steps = 0, []
    while children[node]:
        probs = softmax(child_scores(model, node, x))
        index = draw_index(probs, rng)
        steps.append((node, index, probs))
        node = children[node][index]
    return node, steps


def _gradient_terms(
    model: RdtModel, x: np.ndarray, y: np.ndarray, loss: Loss, rng: np.random.Generator, baseline: float
) -> Tuple[ModelGradient, float, int, List[Tuple[int, int, np.ndarray]]]:
    leaf, steps = _sample_path(model, x, rng)
    leaf_alpha = model.alpha[leaf]
    value = loss.value(leaf_alpha, y)
    features = np.append(x, 1.0)
    theta = {}
    for parent, index, probs in steps:
        coefficient = -probs
        coefficient[index] += 1.0
        theta[parent] = np.outer(coefficient, features) * (value - baseline)
    return ModelGradient(theta, {leaf: loss.grad(leaf_alpha, y)}), value, leaf, steps


def sample_gradient(
    model: RdtModel,
    x,
    y,
    loss: Union[str, LossName, Loss],
    rng: np.random.Generator,
    baseline: float = 0.0,
) -> GradientSample:
    """One-trajectory estimate of grad J at (x, y); the model is not modified."""
    loss = get_loss(loss)
    x = check_input(model, x)
    y = as_label_vector(y, model.num_classes)
    gradient, value, leaf, steps = _gradient_terms(model, x, y, loss, rng, baseline)
    children = model.topology.children
    nodes = (0,) + tuple(children[node][index] for node, index, _ in steps)
    step_probs = tuple(float(probs[index]) for _, index, probs in steps)
    return GradientSample(gradient, value, Trajectory(nodes, step_probs))


def _apply_step(
    model: RdtModel,
    x: np.ndarray,
    y: np.ndarray,
    loss: Loss,
    cfg: TrainConfig,
    rng: np.random.Generator,
    baseline: Optional[RunningBaseline],
    epoch: Optional[int],
) -> float:
    offset = baseline.value if (cfg.baseline_enabled and baseline is not None) else 0.0
    count = cfg.trajectories_per_example
    step = cfg.learning_rate / count
    samples = [_gradient_terms(model, x, y, loss, rng, offset) for _ in range(count)]
    for _, value, _, _ in samples:
        if not math.isfinite(value):
            raise DivergenceError("Loss became non-finite", epoch=epoch)
    touched = set()
    for gradient, _, leaf, _ in samples:
        for node, block in gradient.theta.items():
            model.theta[node] -= step * block
            touched.add(node)
        if not model.alpha_frozen:
            model.alpha[leaf] -= step * gradient.alpha[leaf]
            touched.add(leaf)
    for node in touched:
        values = model.theta[node] if node in model.theta else model.alpha[node]
        if not np.isfinite(values).all():
            raise DivergenceError(f"Parameters of node {node} became non-finite", epoch=epoch)
    total = 0.0
    for _, value, _, _ in samples:
        total += value
        if baseline is not None:
            baseline.update(value)
    return total / count


def train_step(
    model: RdtModel,
    x,
    y,
    cfg: TrainConfig,
    rng: np.random.Generator,
    baseline: Optional[RunningBaseline] = None,
    epoch: Optional[int] = None,
) -> float:
    """Apply the averaged update of M sampled trajectories; returns their mean loss."""
    x = check_input(model, x)
    y = as_label_vector(y, model.num_classes)
    return _apply_step(model, x, y, get_loss(cfg.loss), cfg, rng, baseline, epoch)


def _check_dataset(model: RdtModel, dataset: "Dataset") -> None:
    if dataset.input_dim != model.input_dim or dataset.num_classes != model.num_classes:
        raise DimensionMismatchError(
            f"Dataset (n={dataset.input_dim}, C={dataset.num_classes}) does not match "
            f"model (n={model.input_dim}, C={model.num_classes})"
        )


def train(
    model: RdtModel,
    train_set: "Dataset",
    cfg: TrainConfig,
    eval_set: Optional["Dataset"] = None,
    on_epoch_end: Optional[EpochCallback] = None,
) -> TrainLog:
    """Run cfg.epochs passes of the stochastic procedure; deterministic given cfg.seed."""
    if len(train_set) == 0:
        raise ParameterDomainError("Training set is empty")
    _check_dataset(model, train_set)
    if eval_set is not None:
        _check_dataset(model, eval_set)

    X = train_set.X
    loss = get_loss(cfg.loss)
    rng = np.random.default_rng(cfg.seed)
    baseline = RunningBaseline() if cfg.baseline_enabled else None
    labels = train_set.label_vectors()
    count = len(train_set)
    path_length = model.topology.depth if model.topology.is_complete else None
    log = TrainLog()
    evaluations = 0

    for epoch in range(1, cfg.epochs + 1):
        if cfg.sampling is SamplingMode.UNIFORM:
            order = rng.integers(0, count, size=count)
        elif cfg.shuffle_each_epoch:
            order = rng.permutation(count)
        else:
            order = np.arange(count)

        total = 0.0
        for i in order:
            total += _apply_step(model, X[i], labels[i], loss, cfg, rng, baseline, epoch)
        if path_length is not None:
            evaluations += count * cfg.trajectories_per_example * path_length

        log.train_loss.append(total / count)
        log.train_accuracy.append(evaluate_accuracy(model, train_set, EvalMode.GREEDY).accuracy)
        log.test_accuracy.append(
            evaluate_accuracy(model, eval_set, EvalMode.GREEDY).accuracy
            if eval_set is not None
            else float("nan")
        )
        if cfg.log_every and epoch % cfg.log_every == 0:
            logger.info(
                "epoch %d/%d loss=%.4f train_acc=%.3f test_acc=%.3f",
                epoch, cfg.epochs, log.train_loss[-1], log.train_accuracy[-1], log.test_accuracy[-1],
            )
        if on_epoch_end is not None:
            on_epoch_end(epoch, model)

    log.theta_norm, log.alpha_norm = parameter_norms(model)
    log.policy_evaluations = evaluations
    return log


def estimate_objective(
    model: RdtModel,
    dataset: "Dataset",
    samples_per_example: int,
    rng: np.random.Generator,
    loss: Union[str, LossName, Loss] = LossName.SQUARE,
) -> float:
    """Monte Carlo estimate of J: mean terminal loss over examples and sampled paths."""
    if samples_per_example < 1:
        raise ParameterDomainError(f"samples_per_example must be >= 1. Got: {samples_per_example}")
    if len(dataset) == 0:
        raise ParameterDomainError("Cannot estimate the objective on an empty dataset")
    _check_dataset(model, dataset)
    loss = get_loss(loss)
    labels = dataset.label_vectors()
    total = 0.0
    for x, y in zip(dataset.X, labels):
        for _ in range(samples_per_example):
            leaf, _ = _sample_path(model, x, rng)
            total += loss.value(model.alpha[leaf], y)
    return total / (len(dataset) * samples_per_example)


def dataset_objective(
    model: RdtModel, dataset: "Dataset", loss: Union[str, LossName, Loss] = LossName.SQUARE
) -> float:
    """Exact J over the empirical distribution, all paths enumerated at once."""
    _check_dataset(model, dataset)
    loss = get_loss(loss)
    reach = path_probability_matrix(model, dataset.X)
    leaf_scores = np.stack([model.alpha[leaf] for leaf in model.topology.leaves])
    losses = loss.table(leaf_scores, dataset.label_vectors())
    return float(np.mean(np.sum(reach * losses, axis=1)))


def exact_gradient(
    model: RdtModel, dataset: "Dataset", loss: Union[str, LossName, Loss] = LossName.SQUARE
) -> ModelGradient:
    """Exact gradient of J by path enumeration (score-function term plus pathwise term)."""
    check_enumerable(model)
    _check_dataset(model, dataset)
    if len(dataset) == 0:
        raise ParameterDomainError("Cannot differentiate over an empty dataset")
    loss = get_loss(loss)
    total = ModelGradient.zeros_like(model)
    topo = model.topology
    for x, y in zip(dataset.X, dataset.label_vectors()):
        features = np.append(x, 1.0)
        dists = {node: child_distribution(model, node, x) for node in topo.internal_nodes}
        for path, probability in enumerate_paths(model, x):
            if probability == 0.0:
                continue
            leaf_alpha = model.alpha[path.leaf]
            value = loss.value(leaf_alpha, y)
            for parent, child in zip(path.nodes, path.nodes[1:]):
                dist = dists[parent]
                coefficient = -dist.probs
                coefficient[dist.index_of(child)] += 1.0
                total.theta[parent] += probability * value * np.outer(coefficient, features)
            total.alpha[path.leaf] += probability * loss.grad(leaf_alpha, y)
    scale = 1.0 / len(dataset)
    for block in total.theta.values():
        block *= scale
    for vector in total.alpha.values():
        vector *= scale
    return total
