"""Per-node stochastic routing: softmax over affine child scores."""

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from app.errors import DimensionMismatchError, InvalidPathError, ParameterDomainError
from app.tree_core import RdtModel, Trajectory


@dataclass(frozen=True)
class ChildDistribution:
    """Routing probabilities of one internal node, ordered like its children."""

    node_id: int
    children: Tuple[int, ...]
    probs: np.ndarray

    def index_of(self, child: int) -> int:
        try:
            return self.children.index(child)
        except ValueError:
            raise InvalidPathError(f"Node {child} is not a child of node {self.node_id}")


def softmax(scores: np.ndarray) -> np.ndarray:
    """Softmax along the last axis with max subtraction."""
    shifted = scores - np.max(scores, axis=-1, keepdims=True)
    weights = np.exp(shifted)
    return weights / np.sum(weights, axis=-1, keepdims=True)


def check_input(model: RdtModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (model.input_dim,):
        raise DimensionMismatchError(
            f"Input has shape {x.shape}, model expects ({model.input_dim},)"
        )
    if not np.all(np.isfinite(x)):
        raise ParameterDomainError("Input vector has non-finite entries")
    return x


def child_scores(model: RdtModel, node_id: int, x: np.ndarray) -> np.ndarray:
    if node_id not in model.theta:
        raise ParameterDomainError(f"Node {node_id} is a leaf or does not exist")
    block = model.theta[node_id]
    return block[:, :-1] @ x + block[:, -1]


def child_distribution(model: RdtModel, node_id: int, x) -> ChildDistribution:
    x = check_input(model, x)
    probs = softmax(child_scores(model, node_id, x))
    return ChildDistribution(node_id, model.topology.children[node_id], probs)


def draw_index(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw of one position; zero-probability positions are never returned."""
    cumulative = np.cumsum(probs)
    index = int(np.searchsorted(cumulative, rng.random() * cumulative[-1], side="right"))
    return min(index, len(probs) - 1)


def sample_child(dist: ChildDistribution, rng: np.random.Generator) -> int:
    return dist.children[draw_index(dist.probs, rng)]


def check_path(model: RdtModel, path: Trajectory) -> None:
    topo = model.topology
    nodes = path.nodes
    if not nodes or nodes[0] != 0:
        raise InvalidPathError("A trajectory must start at the root")
    if not all(0 <= node < topo.node_count for node in nodes):
        raise InvalidPathError(f"Trajectory {nodes} names unknown nodes")
    if not topo.is_leaf(nodes[-1]):
        raise InvalidPathError(f"Trajectory {nodes} does not end at a leaf")
    for parent, child in zip(nodes, nodes[1:]):
        if topo.parent[child] != parent:
            raise InvalidPathError(f"{parent} -> {child} is not an edge of the tree")


def trajectory_probability(model: RdtModel, x, path: Trajectory) -> float:
    check_path(model, path)
    x = check_input(model, x)
    probability = 1.0
    for parent, child in zip(path.nodes, path.nodes[1:]):
        index = model.topology.children[parent].index(child)
        probability *= float(softmax(child_scores(model, parent, x))[index])
    return probability


def log_prob_step_gradient(model: RdtModel, node_id: int, x, chosen_child: int) -> np.ndarray:
    """Gradient of log pi(chosen | node, x) w.r.t. this node's block (rows: children, cols: w|b)."""
    dist = child_distribution(model, node_id, x)
    chosen = dist.index_of(chosen_child)
    coefficient = -dist.probs
    coefficient[chosen] += 1.0
    features = np.append(np.asarray(x, dtype=float), 1.0)
    return np.outer(coefficient, features)
