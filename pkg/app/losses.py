"""Terminal losses between a leaf score vector and a +-1 label vector."""

from typing import Callable, NamedTuple, Union

import numpy as np

from app.errors import DimensionMismatchError, ParameterDomainError
from app.models import LossName


def label_vector(class_index: int, num_classes: int) -> np.ndarray:
    """+1 at the class position, -1 elsewhere."""
    if not 0 <= class_index < num_classes:
        raise ParameterDomainError(f"Class index {class_index} outside [0, {num_classes})")
    y = -np.ones(num_classes)
    y[class_index] = 1.0
    return y


def label_matrix(labels: np.ndarray, num_classes: int) -> np.ndarray:
    y = -np.ones((len(labels), num_classes))
    y[np.arange(len(labels)), labels] = 1.0
    return y


def as_label_vector(y, num_classes: int) -> np.ndarray:
    """Accept a class index or an explicit label vector and check the +-1 coding."""
    if isinstance(y, (int, np.integer)):
        return label_vector(int(y), num_classes)
    y = np.asarray(y, dtype=float)
    if y.shape != (num_classes,):
        raise DimensionMismatchError(f"Label vector has shape {y.shape}, expected ({num_classes},)")
    if not (np.all(np.abs(y) == 1.0) and np.sum(y == 1.0) == 1):
        raise ParameterDomainError("Label vector must hold one +1 and -1 elsewhere")
    return y


def _check_lengths(alpha: np.ndarray, y: np.ndarray) -> None:
    if alpha.shape != y.shape:
        raise DimensionMismatchError(f"Score length {alpha.shape} differs from label length {y.shape}")


def square_loss(alpha, y) -> float:
    alpha, y = np.asarray(alpha, dtype=float), np.asarray(y, dtype=float)
    _check_lengths(alpha, y)
    return float(np.sum((alpha - y) ** 2))


def square_loss_grad(alpha, y) -> np.ndarray:
    alpha, y = np.asarray(alpha, dtype=float), np.asarray(y, dtype=float)
    _check_lengths(alpha, y)
    return 2.0 * (alpha - y)


def hinge_loss(alpha, y) -> float:
    alpha, y = np.asarray(alpha, dtype=float), np.asarray(y, dtype=float)
    _check_lengths(alpha, y)
    return float(np.sum(np.maximum(0.0, 1.0 - y * alpha)))


def hinge_loss_grad(alpha, y) -> np.ndarray:
    """Subgradient; 0 at the kink y*alpha == 1."""
    alpha, y = np.asarray(alpha, dtype=float), np.asarray(y, dtype=float)
    _check_lengths(alpha, y)
    return np.where(y * alpha < 1.0, -y, 0.0)


def square_loss_table(leaf_scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """(N, L) losses between every label row and every leaf score row."""
    diff = leaf_scores[np.newaxis, :, :] - labels[:, np.newaxis, :]
    return np.sum(diff**2, axis=-1)


def hinge_loss_table(leaf_scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    margins = labels[:, np.newaxis, :] * leaf_scores[np.newaxis, :, :]
    return np.sum(np.maximum(0.0, 1.0 - margins), axis=-1)


def predict_class(alpha) -> int:
    """Index of the largest score; ties go to the lowest index."""
    alpha = np.asarray(alpha, dtype=float)
    if alpha.size == 0:
        raise ParameterDomainError("Cannot predict from an empty score vector")
    return int(np.argmax(alpha))


class Loss(NamedTuple):
    name: str
    value: Callable[[np.ndarray, np.ndarray], float]
    grad: Callable[[np.ndarray, np.ndarray], np.ndarray]
    table: Callable[[np.ndarray, np.ndarray], np.ndarray]


LOSS_REGISTRY = {
    LossName.SQUARE.value: Loss(LossName.SQUARE.value, square_loss, square_loss_grad, square_loss_table),
    LossName.HINGE.value: Loss(LossName.HINGE.value, hinge_loss, hinge_loss_grad, hinge_loss_table),
}


def get_loss(loss: Union[str, LossName, Loss]) -> Loss:
    if isinstance(loss, Loss):
        return loss
    name = loss.value if isinstance(loss, LossName) else str(loss)
    try:
        return LOSS_REGISTRY[name]
    except KeyError:
        raise ParameterDomainError(
            f"Unknown loss '{name}'. Must be one of: {', '.join(LOSS_REGISTRY)}"
        )
