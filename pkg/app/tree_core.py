"""Tree topology, model parameters, initialisation and model files."""

import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from einops import rearrange
from pydantic import ValidationError

from app import settings
from app.errors import MalformedFileError, ParameterDomainError
from app.models import LeafInit, ModelFile
from app.utils.files import PathLike, atomic_write_text

logger = logging.getLogger(__name__)

MODEL_FORMAT_NAME = "rdt-model"


@dataclass(frozen=True)
class TreeTopology:
    """Parent/children structure of a rooted tree; node 0 is the root.

    The children of a node are ordered; that order is the order of the
    corresponding routing scores and of the serialized parameter blocks.
    """

    parent: Tuple[Optional[int], ...]
    children: Tuple[Tuple[int, ...], ...]
    width: int
    depth: int

    def __post_init__(self):
        count = len(self.parent)
        if count < 3 or len(self.children) != count:
            raise ParameterDomainError("A tree needs a root and at least two leaves")
        if self.parent[0] is not None:
            raise ParameterDomainError("Node 0 must be the root")
        for node in range(1, count):
            p = self.parent[node]
            if p is None:
                raise ParameterDomainError(f"Node {node} has no parent; only node 0 may be a root")
            if not 0 <= p < count or node not in self.children[p]:
                raise ParameterDomainError(f"Parent and children of node {node} disagree")
        for node, kids in enumerate(self.children):
            if len(kids) == 1:
                raise ParameterDomainError(f"Internal node {node} has a single child")
            for child in kids:
                if not 0 < child < count or self.parent[child] != node:
                    raise ParameterDomainError(f"Parent and children of node {node} disagree")
        # every node reachable from the root, i.e. no cycles
        seen = 0
        queue = deque([0])
        while queue:
            seen += 1
            queue.extend(self.children[queue.popleft()])
            if seen > count:
                break
        if seen != count:
            raise ParameterDomainError("Some nodes are not reachable from the root")

    @classmethod
    def from_parents(cls, parent: Sequence[Optional[int]]) -> "TreeTopology":
        """Build a topology from a parent list; children keep increasing id order."""
        count = len(parent)
        children: List[List[int]] = [[] for _ in range(count)]
        for node, p in enumerate(parent):
            if p is not None:
                if not isinstance(p, int) or not 0 <= p < count:
                    raise ParameterDomainError(f"Node {node} has an invalid parent {p!r}")
                children[p].append(node)
        parents = tuple(parent)
        kids = tuple(tuple(c) for c in children)
        width = max((len(c) for c in kids), default=0)
        depth = 0
        for node in range(count):
            steps, current = 0, node
            while current not in (0, None) and steps <= count:
                current = parents[current]
                steps += 1
            depth = max(depth, steps)
        return cls(parent=parents, children=kids, width=max(width, 2), depth=max(depth, 1))

    @property
    def node_count(self) -> int:
        return len(self.parent)

    def is_leaf(self, node: int) -> bool:
        return not self.children[node]

    @property
    def leaves(self) -> Tuple[int, ...]:
        return tuple(n for n in range(self.node_count) if not self.children[n])

    @property
    def internal_nodes(self) -> Tuple[int, ...]:
        return tuple(n for n in range(self.node_count) if self.children[n])

    @property
    def leaf_count(self) -> int:
        return len(self.leaves)

    @property
    def is_complete(self) -> bool:
        return self.leaf_count == self.width**self.depth and all(
            len(kids) in (0, self.width) for kids in self.children
        )

    def node_depth(self, node: int) -> int:
        steps = 0
        while node != 0:
            node = self.parent[node]
            steps += 1
        return steps

    def path_to(self, node: int) -> Tuple[int, ...]:
        """Root-to-node id sequence."""
        path = [node]
        while node != 0:
            node = self.parent[node]
            path.append(node)
        return tuple(reversed(path))

    def breadth_first(self) -> Tuple[int, ...]:
        order = []
        queue = deque([0])
        while queue:
            node = queue.popleft()
            order.append(node)
            queue.extend(self.children[node])
        return tuple(order)


@dataclass(frozen=True)
class Trajectory:
    """A root-to-leaf node sequence and the probability of every step taken."""

    nodes: Tuple[int, ...]
    step_probs: Tuple[float, ...]

    @property
    def leaf(self) -> int:
        return self.nodes[-1]

    @property
    def probability(self) -> float:
        return float(math.prod(self.step_probs))


@dataclass(eq=False)
class RdtModel:
    """Topology plus routing blocks theta (one row w|b per child) and leaf scores alpha."""

    topology: TreeTopology
    input_dim: int
    num_classes: int
    theta: Dict[int, np.ndarray] = field(default_factory=dict)
    alpha: Dict[int, np.ndarray] = field(default_factory=dict)
    alpha_frozen: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        topo = self.topology
        if self.input_dim < 1 or self.num_classes < 2:
            raise ParameterDomainError("input_dim must be >= 1 and num_classes >= 2")
        if set(self.theta) != set(topo.internal_nodes):
            raise ParameterDomainError("theta must hold exactly one block per internal node")
        if set(self.alpha) != set(topo.leaves):
            raise ParameterDomainError("alpha must hold exactly one vector per leaf")
        for node, block in self.theta.items():
            if block.shape != (len(topo.children[node]), self.input_dim + 1):
                raise ParameterDomainError(f"theta block of node {node} has shape {block.shape}")
            if not np.all(np.isfinite(block)):
                raise ParameterDomainError(f"theta block of node {node} is not finite")
        for node, vector in self.alpha.items():
            if vector.shape != (self.num_classes,):
                raise ParameterDomainError(f"alpha of leaf {node} has shape {vector.shape}")
            if not np.all(np.isfinite(vector)):
                raise ParameterDomainError(f"alpha of leaf {node} is not finite")

    def copy(self) -> "RdtModel":
        return RdtModel(
            topology=self.topology,
            input_dim=self.input_dim,
            num_classes=self.num_classes,
            theta={node: block.copy() for node, block in self.theta.items()},
            alpha={node: vector.copy() for node, vector in self.alpha.items()},
            alpha_frozen=self.alpha_frozen,
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RdtModel):
            return NotImplemented
        return (
            self.topology == other.topology
            and self.input_dim == other.input_dim
            and self.num_classes == other.num_classes
            and self.alpha_frozen == other.alpha_frozen
            and self.theta.keys() == other.theta.keys()
            and self.alpha.keys() == other.alpha.keys()
            and all(np.array_equal(self.theta[n], other.theta[n]) for n in self.theta)
            and all(np.array_equal(self.alpha[n], other.alpha[n]) for n in self.alpha)
        )


def build_complete_tree(width: int, depth: int) -> TreeTopology:
    """Complete W-ary tree of the given depth with breadth-first ids."""
    if width < 2:
        raise ParameterDomainError(f"Tree width must be >= 2. Got: {width}")
    if depth < 1:
        raise ParameterDomainError(f"Tree depth must be >= 1. Got: {depth}")
    node_count = (width ** (depth + 1) - 1) // (width - 1)
    internal_count = (width**depth - 1) // (width - 1)
    parent = (None,) + tuple((node - 1) // width for node in range(1, node_count))
    children = tuple(
        tuple(range(node * width + 1, node * width + width + 1)) if node < internal_count else ()
        for node in range(node_count)
    )
    return TreeTopology(parent=parent, children=children, width=width, depth=depth)


def init_model(
    topology: TreeTopology,
    input_dim: int,
    num_classes: int,
    init_scale: float = settings.INIT_SCALE,
    seed: int = 0,
    leaf_init: LeafInit = LeafInit.UNIFORM,
) -> RdtModel:
    """All parameters drawn independently from U[-init_scale, init_scale].

    With `LeafInit.LABEL_MEAN` the leaf scores are shifted by 2/C - 1, so an
    untrained leaf scores every class like the average label, and moving a
    leaf toward one class raises its loss on every other class.
    """
    if input_dim < 1:
        raise ParameterDomainError(f"input_dim must be >= 1. Got: {input_dim}")
    if num_classes < 2:
        raise ParameterDomainError(f"num_classes must be >= 2. Got: {num_classes}")
    if not init_scale > 0:
        raise ParameterDomainError(f"init_scale must be > 0. Got: {init_scale}")
    leaf_init = LeafInit(leaf_init)
    rng = np.random.default_rng(seed)
    theta = {
        node: rng.uniform(-init_scale, init_scale, size=(len(topology.children[node]), input_dim + 1))
        for node in topology.internal_nodes
    }
    centre = 2.0 / num_classes - 1.0 if leaf_init is LeafInit.LABEL_MEAN else 0.0
    alpha = {
        node: centre + rng.uniform(-init_scale, init_scale, size=num_classes)
        for node in topology.leaves
    }
    return RdtModel(topology, input_dim, num_classes, theta, alpha, alpha_frozen=False)


def parameter_vector(model: RdtModel) -> np.ndarray:
    """theta blocks then alpha vectors, each in increasing node-id order."""
    parts = [rearrange(model.theta[node], "c k -> (c k)") for node in sorted(model.theta)]
    parts += [model.alpha[node] for node in sorted(model.alpha)]
    return np.concatenate(parts)


def with_parameter_vector(model: RdtModel, vector: np.ndarray) -> RdtModel:
    """Copy of the model whose parameters are read back from a flat vector."""
    vector = np.asarray(vector, dtype=float)
    expected = sum(block.size for block in model.theta.values()) + len(model.alpha) * model.num_classes
    if vector.shape != (expected,):
        raise ParameterDomainError(
            f"Parameter vector has shape {vector.shape}, model needs ({expected},)"
        )
    result = model.copy()
    offset = 0
    for node in sorted(result.theta):
        rows, cols = result.theta[node].shape
        chunk = vector[offset : offset + rows * cols]
        result.theta[node] = rearrange(chunk, "(c k) -> c k", c=rows).copy()
        offset += rows * cols
    for node in sorted(result.alpha):
        result.alpha[node] = vector[offset : offset + model.num_classes].copy()
        offset += model.num_classes
    return result


def parameter_norms(model: RdtModel) -> Tuple[float, float]:
    theta_norm = math.sqrt(sum(float(np.sum(block**2)) for block in model.theta.values()))
    alpha_norm = math.sqrt(sum(float(np.sum(vector**2)) for vector in model.alpha.values()))
    return theta_norm, alpha_norm


def model_to_dict(model: RdtModel) -> Dict:
    topo = model.topology
    return {
        "format": MODEL_FORMAT_NAME,
        "version": settings.MODEL_FORMAT_VERSION,
        "input_dim": model.input_dim,
        "num_classes": model.num_classes,
        "alpha_frozen": model.alpha_frozen,
        "topology": {"width": topo.width, "depth": topo.depth, "parent": list(topo.parent)},
        "theta": {str(node): model.theta[node].tolist() for node in sorted(model.theta)},
        "alpha": {str(node): model.alpha[node].tolist() for node in sorted(model.alpha)},
    }


def save_model(model: RdtModel, path: PathLike) -> None:
    """Write the model as JSON; floats use shortest round-trip repr."""
    text = json.dumps(model_to_dict(model), indent=1)
    atomic_write_text(path, text + "\n")
    logger.debug("Saved model with %d nodes to %s", model.topology.node_count, path)


def model_from_dict(data: Dict, path: Optional[PathLike] = None) -> RdtModel:
    where = str(path) if path is not None else None
    try:
        parsed = ModelFile.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        field_name = ".".join(str(part) for part in first["loc"]) or "__root__"
        raise MalformedFileError(first["msg"], path=where, field=field_name) from e

    if parsed.version != settings.MODEL_FORMAT_VERSION:
        raise MalformedFileError(
            f"unsupported version {parsed.version}", path=where, field="version"
        )
    try:
        topology = TreeTopology.from_parents(parsed.topology.parent)
    except ParameterDomainError as e:
        raise MalformedFileError(str(e), path=where, field="topology.parent") from e
    if topology.width != parsed.topology.width or topology.depth != parsed.topology.depth:
        raise MalformedFileError(
            "width/depth disagree with the parent list", path=where, field="topology"
        )

    internal, leaves = set(topology.internal_nodes), set(topology.leaves)
    if set(parsed.theta) != internal:
        missing = sorted(internal - set(parsed.theta)) or sorted(set(parsed.theta) - internal)
        raise MalformedFileError(
            f"theta must cover exactly the internal nodes (offending ids {missing})",
            path=where,
            field="theta",
        )
    if set(parsed.alpha) != leaves:
        missing = sorted(leaves - set(parsed.alpha)) or sorted(set(parsed.alpha) - leaves)
        raise MalformedFileError(
            f"alpha must cover exactly the leaves (offending ids {missing})",
            path=where,
            field="alpha",
        )

    theta = {}
    for node, rows in parsed.theta.items():
        block = np.array(rows, dtype=float)
        if block.shape != (len(topology.children[node]), parsed.input_dim + 1):
            raise MalformedFileError(
                f"block has shape {block.shape}", path=where, field=f"theta.{node}"
            )
        theta[node] = block
    alpha = {}
    for node, values in parsed.alpha.items():
        vector = np.array(values, dtype=float)
        if vector.shape != (parsed.num_classes,):
            raise MalformedFileError(
                f"vector has length {vector.size}", path=where, field=f"alpha.{node}"
            )
        alpha[node] = vector
    try:
        return RdtModel(
            topology=topology,
            input_dim=parsed.input_dim,
            num_classes=parsed.num_classes,
            theta=theta,
            alpha=alpha,
            alpha_frozen=parsed.alpha_frozen,
        )
    except ParameterDomainError as e:
        raise MalformedFileError(str(e), path=where, field="theta/alpha") from e


def load_model(path: PathLike) -> RdtModel:
    with open(path) as model_file:
        text = model_file.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise MalformedFileError(f"invalid or truncated JSON: {e.msg}", path=str(path), line=e.lineno) from e
    if not isinstance(data, dict):
        raise MalformedFileError("top level must be an object", path=str(path))
    return model_from_dict(data, path)
