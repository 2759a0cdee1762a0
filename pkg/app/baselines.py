"""Random Tree baseline: same architecture, frozen random one-hot(+-1) leaves."""

import logging
from typing import TYPE_CHECKING, Optional

import numpy as np

from app import settings
from app.errors import ParameterDomainError
from app.inference import leaf_allocation
from app.models import TrainConfig
from app.trainer import EpochCallback, TrainLog, train
from app.tree_core import RdtModel, TreeTopology, init_model

if TYPE_CHECKING:
    from app.datagen import Dataset

logger = logging.getLogger(__name__)

# keeps the leaf-label stream independent from the parameter stream of init_model
LABEL_STREAM = 1


def make_random_tree(
    topology: TreeTopology,
    input_dim: int,
    num_classes: int,
    init_scale: float = settings.INIT_SCALE,
    seed: int = 0,
) -> RdtModel:
    model = init_model(topology, input_dim, num_classes, init_scale, seed)
    rng = np.random.default_rng([seed, LABEL_STREAM])
    for leaf in topology.leaves:
        vector = -np.ones(num_classes)
        vector[rng.integers(num_classes)] = 1.0
        model.alpha[leaf] = vector
    model.alpha_frozen = True
    allocation = leaf_allocation(model)
    logger.info(
        "Random tree with %d leaves covers %d/%d classes",
        topology.leaf_count, len(allocation.covered_classes), num_classes,
    )
    return model


def coverage_upper_bound(model: RdtModel, dataset: "Dataset") -> float:
    """Best reachable accuracy: share of examples whose class some leaf predicts."""
    covered = np.array(leaf_allocation(model).covered_classes)
    return float(np.mean(np.isin(dataset.labels, covered)))


def train_random_tree(
    model: RdtModel,
    train_set: "Dataset",
    cfg: TrainConfig,
    eval_set: Optional["Dataset"] = None,
    on_epoch_end: Optional[EpochCallback] = None,
) -> TrainLog:
    if not model.alpha_frozen:
        raise ParameterDomainError("train_random_tree expects a model with frozen leaves")
    return train(model, train_set, cfg, eval_set, on_epoch_end)
