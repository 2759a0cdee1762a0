"""Gaussian-cluster datasets, their CSV files, and decision-frontier grids."""

import csv
import io
import logging
import math
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Sequence, Tuple

import numpy as np
from einops import rearrange

from app.errors import DimensionMismatchError, MalformedFileError, ParameterDomainError
from app.inference import predict_batch
from app.losses import label_matrix
from app.models import EvalMode
from app.tree_core import RdtModel
from app.utils.files import PathLike, atomic_write_text

logger = logging.getLogger(__name__)

DATASET_HEADER = ["C", "n", "split"]
FRONTIER_HEADER = ["x0_min", "x1_min", "x0_max", "x1_max", "resolution"]
SPLITS = ("train", "test", "validation")


class LabeledExample(NamedTuple):
    x: np.ndarray
    label: int


@dataclass(eq=False)
class Dataset:
    """Inputs X (N, n) with 0-based class labels; label vectors are built on demand."""

    X: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.X.ndim != 2 or len(self.X) != len(self.labels):
            raise DimensionMismatchError(
                f"Inputs {self.X.shape} and labels {self.labels.shape} do not line up"
            )
        if self.num_classes < 2:
            raise ParameterDomainError(f"num_classes must be >= 2. Got: {self.num_classes}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ParameterDomainError(f"Labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(self.X)):
            raise ParameterDomainError("Dataset inputs must be finite")
        if self.split not in SPLITS:
            raise ParameterDomainError(f"Split must be one of {SPLITS}. Got: {self.split}")

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[LabeledExample]:
        for x, label in zip(self.X, self.labels):
            yield LabeledExample(x, int(label))

    @property
    def input_dim(self) -> int:
        return self.X.shape[1]

    @property
    def examples(self) -> Tuple[LabeledExample, ...]:
        return tuple(self)

    def label_vectors(self) -> np.ndarray:
        return label_matrix(self.labels, self.num_classes)

    def subset(self, indices: Sequence[int], split: str) -> "Dataset":
        indices = np.asarray(indices, dtype=int)
        return Dataset(self.X[indices], self.labels[indices], self.num_classes, split)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.split == other.split
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.labels, other.labels)
        )


def generate_gaussian_dataset(
    num_classes: int,
    per_class: int,
    seed: int,
    mean_bounds: Tuple[float, float, float, float] = (-1.0, -1.0, 1.0, 1.0),
    sigma_range: Tuple[float, float] = (0.05, 0.15),
) -> Tuple[Dataset, Dataset]:
    """One isotropic 2D Gaussian per class; first half of each class trains, second half tests."""
    if num_classes < 2:
        raise ParameterDomainError(f"Need at least 2 classes. Got: {num_classes}")
    if per_class < 2 or per_class % 2:
        raise ParameterDomainError(f"per_class must be even and >= 2. Got: {per_class}")
    low, high = sigma_range
    if not 0 < low <= high:
        raise ParameterDomainError(f"Sigma range must satisfy 0 < low <= high. Got: {sigma_range}")
    x0_min, x1_min, x0_max, x1_max = mean_bounds
    if not (x0_min < x0_max and x1_min < x1_max):
        raise ParameterDomainError(f"Invalid mean bounds {mean_bounds}")

    rng = np.random.default_rng(seed)
    half = per_class // 2
    train_x, test_x = [], []
    for _ in range(num_classes):
        mu = rng.uniform([x0_min, x1_min], [x0_max, x1_max])
        sigma = rng.uniform(low, high)
        draws = mu + sigma * rng.standard_normal((per_class, 2))
        train_x.append(draws[:half])
        test_x.append(draws[half:])
    labels = np.repeat(np.arange(num_classes), half)
    train = Dataset(np.concatenate(train_x), labels, num_classes, "train")
    test = Dataset(np.concatenate(test_x), labels.copy(), num_classes, "test")
    logger.info(
        "Generated %d classes x %d vectors (seed=%d, sigma in [%g, %g])",
        num_classes, per_class, seed, low, high,
    )
    return train, test


def train_validation_split(
    dataset: Dataset, validation_fraction: float, seed: int
) -> Tuple[Dataset, Dataset]:
    """Seeded random hold-out; both parts keep at least one example."""
    if not 0 < validation_fraction < 1:
        raise ParameterDomainError(f"validation_fraction must lie in (0, 1). Got: {validation_fraction}")
    if len(dataset) < 2:
        raise ParameterDomainError("Need at least two examples to carve a validation split")
    order = np.random.default_rng(seed).permutation(len(dataset))
    held_out = min(max(1, int(round(validation_fraction * len(dataset)))), len(dataset) - 1)
    return (
        dataset.subset(np.sort(order[held_out:]), "train"),
        dataset.subset(np.sort(order[:held_out]), "validation"),
    )


def dataset_to_csv(dataset: Dataset) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(DATASET_HEADER)
    writer.writerow([dataset.num_classes, dataset.input_dim, dataset.split])
    writer.writerow([f"x{k}" for k in range(dataset.input_dim)] + ["class"])
    for x, label in zip(dataset.X, dataset.labels):
        writer.writerow([repr(float(value)) for value in x] + [int(label)])
    return buffer.getvalue()


def save_dataset(dataset: Dataset, path: PathLike) -> None:
    atomic_write_text(path, dataset_to_csv(dataset))


def _parse_int(text: str, path: str, line: int, field_name: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise MalformedFileError(f"'{text}' is not an integer", path=path, line=line, field=field_name)


def load_dataset(path: PathLike) -> Dataset:
    where = str(path)
    with open(path, newline="") as data_file:
        rows = list(csv.reader(data_file))
    if not rows or rows[0] != DATASET_HEADER:
        raise MalformedFileError(
            f"missing header {','.join(DATASET_HEADER)}", path=where, line=1
        )
    if len(rows) < 3 or len(rows[1]) != 3:
        raise MalformedFileError("missing C,n,split values", path=where, line=2)
    num_classes = _parse_int(rows[1][0], where, 2, "C")
    input_dim = _parse_int(rows[1][1], where, 2, "n")
    split = rows[1][2]
    if num_classes < 2 or input_dim < 1:
        raise MalformedFileError("C must be >= 2 and n >= 1", path=where, line=2)
    if split not in SPLITS:
        raise MalformedFileError(f"unknown split '{split}'", path=where, line=2, field="split")
    expected_columns = [f"x{k}" for k in range(input_dim)] + ["class"]
    if rows[2] != expected_columns:
        raise MalformedFileError(
            f"column header must be {','.join(expected_columns)}", path=where, line=3
        )

    X = np.empty((len(rows) - 3, input_dim))
    labels = np.empty(len(rows) - 3, dtype=int)
    for offset, row in enumerate(rows[3:]):
        line = offset + 4
        if len(row) != input_dim + 1:
            raise MalformedFileError(
                f"expected {input_dim + 1} columns, found {len(row)}", path=where, line=line
            )
        try:
            values = [float(value) for value in row[:input_dim]]
        except ValueError:
            raise MalformedFileError("non-numeric input value", path=where, line=line)
        if not all(math.isfinite(value) for value in values):
            raise MalformedFileError("non-finite input value", path=where, line=line)
        label = _parse_int(row[input_dim], where, line, "class")
        if not 0 <= label < num_classes:
            raise MalformedFileError(
                f"class {label} outside [0, {num_classes})", path=where, line=line, field="class"
            )
        X[offset] = values
        labels[offset] = label
    return Dataset(X, labels, num_classes, split)


@dataclass(frozen=True)
class FrontierGrid:
    """Greedy predictions on a resolution x resolution lattice; x0 varies slowest."""

    bounds: Tuple[float, float, float, float]
    resolution: int
    points: np.ndarray
    classes: np.ndarray


def frontier_grid(
    model: RdtModel, bounds: Tuple[float, float, float, float], resolution: int
) -> FrontierGrid:
    if resolution < 2:
        raise ParameterDomainError(f"resolution must be >= 2. Got: {resolution}")
    if model.input_dim != 2:
        raise DimensionMismatchError(f"Frontier grids need 2D models; model has n={model.input_dim}")
    x0_min, x1_min, x0_max, x1_max = bounds
    if not (x0_min < x0_max and x1_min < x1_max):
        raise ParameterDomainError(f"Invalid bounds {bounds}")
    axis0 = np.linspace(x0_min, x0_max, resolution)
    axis1 = np.linspace(x1_min, x1_max, resolution)
    lattice = np.stack(np.meshgrid(axis0, axis1, indexing="ij"))
    points = rearrange(lattice, "d a b -> (a b) d")
    _, classes = predict_batch(model, points, EvalMode.GREEDY)
    return FrontierGrid(tuple(float(b) for b in bounds), resolution, points, classes)


def frontier_to_csv(grid: FrontierGrid) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(FRONTIER_HEADER)
    writer.writerow([repr(b) for b in grid.bounds] + [grid.resolution])
    writer.writerow(["x0", "x1", "class"])
    for (x0, x1), label in zip(grid.points, grid.classes):
        writer.writerow([repr(float(x0)), repr(float(x1)), int(label)])
    return buffer.getvalue()


def save_frontier(grid: FrontierGrid, path: PathLike) -> None:
    atomic_write_text(path, frontier_to_csv(grid))
