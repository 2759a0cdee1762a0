"""Init module for models."""

from .configs import (
    BaseConfig,
    DatasetSpec,
    ExperimentConfig,
    ModelFile,
    TopologySection,
    TrainConfig,
    TreeShape,
    TuningGrid,
)
from .params import Box, EvalMode, LeafInit, LossName, Method, SamplingMode, SigmaRange

CONFIG_REGISTRY = {
    "train": TrainConfig,
    "tree_shape": TreeShape,
    "dataset": DatasetSpec,
    "grid": TuningGrid,
    "experiment": ExperimentConfig,
}
