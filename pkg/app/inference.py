"""Routing an input to a leaf: sampled, greedy, batched and fully enumerated."""

from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np

from app import settings
from app.errors import DimensionMismatchError, ParameterDomainError, TreeTooLargeError
from app.losses import Loss, as_label_vector, get_loss, predict_class
from app.models import EvalMode
from app.routing_policy import check_input, child_distribution, sample_child, softmax
from app.tree_core import RdtModel, Trajectory

if TYPE_CHECKING:
    from app.datagen import Dataset


class Prediction(NamedTuple):
    alpha: np.ndarray
    class_index: int
    trajectory: Trajectory
    policy_evaluations: int


class EvaluationResult(NamedTuple):
    accuracy: float
    standard_error: float
    mode: EvalMode


@dataclass(frozen=True)
class LeafAllocation:
    """Category each leaf predicts, and which categories the tree can output at all."""

    leaf_classes: Dict[int, int]
    num_classes: int

    @property
    def covered_classes(self) -> Tuple[int, ...]:
        return tuple(sorted(set(self.leaf_classes.values())))

    @property
    def coverage(self) -> float:
        return len(self.covered_classes) / self.num_classes

    def leaves_of(self, class_index: int) -> Tuple[int, ...]:
        return tuple(leaf for leaf, c in self.leaf_classes.items() if c == class_index)


def _walk(model: RdtModel, x: np.ndarray, rng: Optional[np.random.Generator]) -> Tuple[Trajectory, int]:
    topo = model.topology
    node = 0
    nodes = [0]
    step_probs = []
    evaluations = 0
    while not topo.is_leaf(node):
        dist = child_distribution(model, node, x)
        evaluations += 1
        if rng is None:
            index = int(np.argmax(dist.probs))
            child = dist.children[index]
        else:
            child = sample_child(dist, rng)
            index = dist.children.index(child)
        step_probs.append(float(dist.probs[index]))
        nodes.append(child)
        node = child
    return Trajectory(tuple(nodes), tuple(step_probs)), evaluations


def sample_trajectory(model: RdtModel, x, rng: np.random.Generator) -> Trajectory:
    x = check_input(model, x)
    return _walk(model, x, rng)[0]


def greedy_trajectory(model: RdtModel, x) -> Trajectory:
    """Follow the most probable child at every node (ties: lowest child index)."""
    x = check_input(model, x)
    return _walk(model, x, None)[0]


def predict(
    model: RdtModel,
    x,
    mode: Union[EvalMode, str] = EvalMode.GREEDY,
    rng: Optional[np.random.Generator] = None,
) -> Prediction:
    mode = EvalMode(mode)
    if mode is EvalMode.STOCHASTIC and rng is None:
        raise ParameterDomainError("Stochastic prediction needs a random generator")
    if mode is EvalMode.GREEDY and rng is not None:
        raise ParameterDomainError("Greedy prediction takes no random generator")
    x = check_input(model, x)
    trajectory, evaluations = _walk(model, x, rng)
    alpha = model.alpha[trajectory.leaf]
    return Prediction(alpha, predict_class(alpha), trajectory, evaluations)


def check_enumerable(model: RdtModel) -> None:
    if model.topology.leaf_count > settings.MAX_ENUMERATED_LEAVES:
        raise TreeTooLargeError(
            f"Tree has {model.topology.leaf_count} leaves; enumeration is limited to "
            f"{settings.MAX_ENUMERATED_LEAVES}"
        )


def enumerate_paths(model: RdtModel, x) -> List[Tuple[Trajectory, float]]:
    """Every root-to-leaf path with its probability, leaves in left-to-right order."""
    check_enumerable(model)
    x = check_input(model, x)
    topo = model.topology
    dists = {node: child_distribution(model, node, x) for node in topo.internal_nodes}
    paths: List[Tuple[Trajectory, float]] = []

    def descend(node: int, nodes: Tuple[int, ...], probs: Tuple[float, ...]) -> None:
        if topo.is_leaf(node):
            trajectory = Trajectory(nodes, probs)
            paths.append((trajectory, trajectory.probability))
            return
        dist = dists[node]
        for index, child in enumerate(dist.children):
            descend(child, nodes + (child,), probs + (float(dist.probs[index]),))

    descend(0, (0,), ())
    return paths


def exact_expected_loss(model: RdtModel, x, y, loss: Union[str, Loss] = "square") -> float:
    loss = get_loss(loss)
    y = as_label_vector(y, model.num_classes)
    return float(
        sum(p * loss.value(model.alpha[path.leaf], y) for path, p in enumerate_paths(model, x))
    )


def _check_batch(model: RdtModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise DimensionMismatchError(
            f"Batch has shape {X.shape}, model expects (N, {model.input_dim})"
        )
    return X


def path_probability_matrix(model: RdtModel, X) -> np.ndarray:
    """(N, L) probability of reaching each leaf (columns in topology.leaves order)."""
    check_enumerable(model)
    X = _check_batch(model, X)
    topo = model.topology
    reach = {0: np.ones(len(X))}
    for node in topo.breadth_first():
        if topo.is_leaf(node):
            continue
        block = model.theta[node]
        probs = softmax(X @ block[:, :-1].T + block[:, -1])
        for index, child in enumerate(topo.children[node]):
            reach[child] = reach[node] * probs[:, index]
    return np.stack([reach[leaf] for leaf in topo.leaves], axis=1)


def predict_batch(
    model: RdtModel,
    X,
    mode: Union[EvalMode, str] = EvalMode.GREEDY,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Leaf ids and predicted classes for a batch; greedy rows match predict() exactly."""
    mode = EvalMode(mode)
    if mode is EvalMode.STOCHASTIC and rng is None:
        raise ParameterDomainError("Stochastic prediction needs a random generator")
    X = _check_batch(model, X)
    topo = model.topology
    current = np.zeros(len(X), dtype=int)
    is_leaf = np.array([topo.is_leaf(node) for node in range(topo.node_count)])
    while not np.all(is_leaf[current]):
        for node in np.unique(current[~is_leaf[current]]):
            rows = np.flatnonzero(current == node)
            block = model.theta[int(node)]
            probs = softmax(X[rows] @ block[:, :-1].T + block[:, -1])
            if mode is EvalMode.GREEDY:
                index = np.argmax(probs, axis=1)
            else:
                cumulative = np.cumsum(probs, axis=1)
                draws = rng.random(len(rows))[:, np.newaxis] * cumulative[:, -1:]
                index = np.minimum(np.sum(cumulative <= draws, axis=1), probs.shape[1] - 1)
            current[rows] = np.asarray(topo.children[int(node)])[index]
    leaf_classes = {leaf: predict_class(model.alpha[leaf]) for leaf in topo.leaves}
    classes = np.array([leaf_classes[int(leaf)] for leaf in current], dtype=int)
    return current, classes


def evaluate_accuracy(
    model: RdtModel,
    dataset: "Dataset",
    mode: Union[EvalMode, str] = EvalMode.GREEDY,
    rng: Optional[np.random.Generator] = None,
    samples: int = 1,
) -> EvaluationResult:
    """Share of correctly classified examples; stochastic mode averages `samples` routings."""
    mode = EvalMode(mode)
    if dataset.input_dim != model.input_dim or dataset.num_classes != model.num_classes:
        raise DimensionMismatchError(
            f"Dataset (n={dataset.input_dim}, C={dataset.num_classes}) does not match "
            f"model (n={model.input_dim}, C={model.num_classes})"
        )
    if len(dataset) == 0:
        raise ParameterDomainError("Cannot evaluate on an empty dataset")
    if mode is EvalMode.GREEDY:
        _, classes = predict_batch(model, dataset.X, mode)
        return EvaluationResult(float(np.mean(classes == dataset.labels)), 0.0, mode)
    if samples < 1:
        raise ParameterDomainError(f"samples must be >= 1. Got: {samples}")
    hits = np.stack(
        [predict_batch(model, dataset.X, mode, rng)[1] == dataset.labels for _ in range(samples)]
    )
    accuracy = float(np.mean(hits))
    standard_error = float(np.sqrt(accuracy * (1.0 - accuracy) / hits.size))
    return EvaluationResult(accuracy, standard_error, mode)


def leaf_allocation(model: RdtModel) -> LeafAllocation:
    return LeafAllocation(
        leaf_classes={leaf: predict_class(model.alpha[leaf]) for leaf in model.topology.leaves},
        num_classes=model.num_classes,
    )
