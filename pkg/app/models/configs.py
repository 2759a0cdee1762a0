"""Configuration models for validating training, dataset and experiment parameters."""

from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from app import settings

from .params import Box, EvalMode, LeafInit, LossName, Method, SamplingMode, SigmaRange


class BaseConfig(BaseModel):
    """Base class for validating run parameters."""

    model_config = ConfigDict(
        validate_assignment=True,
        extra="forbid",
    )

    @classmethod
    def get_fields(cls) -> List[str]:
        """Return a list of field names for the config."""
        return list(cls.model_fields.keys())

    @classmethod
    def get_fields_info(cls) -> Dict[str, str]:
        """Return a dictionary of field names and their descriptions."""
        fields_info = {}
        for field_name, field in cls.model_fields.items():
            fields_info[field_name] = field.description or ""
        return fields_info

    @classmethod
    def create_and_validate(
        cls, data: Dict[str, Any]
    ) -> Tuple[Optional["BaseConfig"], Dict[str, str], List[str]]:
        """
        Attempts to create a validated config instance from input data.

        Returns a tuple containing:
        1. The validated instance (or None if validation fails).
        2. A dictionary of validation errors keyed by dotted field path.
        3. A list of any missing required fields.
        """
        errors: Dict[str, str] = {}
        missing_fields: List[str] = []

        try:
            instance = cls.model_validate(data)
            return instance, {}, []

        except ValidationError as e:
            for error in e.errors():
                field_name = (
                    ".".join(str(part) for part in error["loc"])
                    if error["loc"]
                    else "__root__"
                )

                if error["type"] == "missing":
                    missing_fields.append(field_name)
                else:
                    errors[field_name] = error["msg"]

            return None, errors, missing_fields


class TrainConfig(BaseConfig):
    """Hyperparameters of the stochastic policy-gradient procedure."""

    learning_rate: float = Field(0.1, gt=0, description="Learning rate (step size) of every update.")
    epochs: int = Field(50, ge=1, description="Number of passes over the training set.")
    trajectories_per_example: int = Field(
        1, ge=1, description="Sampled trajectories M per visited example."
    )
    loss: LossName = Field(LossName.SQUARE, description="Terminal loss: 'square' or 'hinge'.")
    seed: int = Field(0, description="Seed of the training random generator.")
    baseline_enabled: bool = Field(
        False, description="Subtract the running mean loss in the routing update."
    )
    shuffle_each_epoch: bool = Field(
        True, description="Visit examples in a fresh random order every epoch."
    )
    sampling: SamplingMode = Field(
        SamplingMode.EPOCH,
        description="'epoch' visits every example once per epoch, 'uniform' draws N examples with replacement.",
    )
    log_every: int = Field(
        0, ge=0, description="Log an INFO progress line every this many epochs (0 disables)."
    )


class TreeShape(BaseConfig):
    """Width and depth of a complete tree."""

    width: int = Field(..., ge=2, description="Children per internal node (W).")
    depth: int = Field(..., ge=1, description="Depth of every leaf (D).")

    @property
    def leaves(self) -> int:
        return self.width**self.depth


class DatasetSpec(BaseConfig):
    """Gaussian-cluster dataset description."""

    classes: int = Field(16, ge=2, description="Number of categories C.")
    per_class: int = Field(
        100, ge=2, description="Vectors per category, split half train / half test."
    )
    seed: int = Field(0, description="Seed of the dataset draw.")
    sigma_range: SigmaRange = Field(
        (0.05, 0.15), description="Interval the per-class standard deviation is drawn from."
    )
    mean_bounds: Box = Field(
        (-1.0, -1.0, 1.0, 1.0), description="Box the per-class means are drawn from."
    )

    @field_validator("per_class")
    @classmethod
    def per_class_is_even(cls, value: int) -> int:
        if value % 2:
            raise ValueError(f"per_class must be even to split 50/50. Got: {value}")
        return value


class TuningGrid(BaseConfig):
    """Hyperparameter grid searched on a validation split of the training set."""

    learning_rates: List[float] = Field(
        [0.3, 0.1, 0.03, 0.01], min_length=1, description="Candidate learning rates."
    )
    epochs: List[int] = Field(
        [50, 200, 500], min_length=1, description="Candidate epoch budgets."
    )
    validation_fraction: float = Field(
        0.2, gt=0, lt=1, description="Share of the training set held out for selection."
    )

    @field_validator("learning_rates")
    @classmethod
    def learning_rates_positive(cls, values: List[float]) -> List[float]:
        if any(value <= 0 for value in values):
            raise ValueError(f"learning rates must be positive. Got: {values}")
        return values

    @field_validator("epochs")
    @classmethod
    def epochs_positive(cls, values: List[int]) -> List[int]:
        if any(value < 1 for value in values):
            raise ValueError(f"epoch budgets must be >= 1. Got: {values}")
        return values


class ExperimentConfig(BaseConfig):
    """A full table reproduction: one dataset, several tree shapes, both methods."""

    name: str = Field("experiment", description="Title printed above the result table.")
    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    rows: List[TreeShape] = Field(..., min_length=1, description="Tree shapes, one table row each.")
    train: TrainConfig = Field(
        default_factory=TrainConfig,
        description="Training settings; learning_rate, epochs and seed are set per run.",
    )
    grid: TuningGrid = Field(default_factory=TuningGrid)
    init_scale: float = Field(
        settings.INIT_SCALE, gt=0, description="Half-width of the uniform initialisation."
    )
    leaf_init: LeafInit = Field(
        LeafInit.UNIFORM,
        description="Centre of the random RDT leaf scores: 'uniform' (zero) or 'label_mean' (2/C - 1).",
    )
    runs: int = Field(5, ge=1, description="Seeded runs averaged per row and method.")
    master_seed: int = Field(0, description="Run r uses seed master_seed + r.")
    methods: List[Method] = Field(
        [Method.RDT, Method.RANDOM_TREE], min_length=1, description="Compared methods."
    )
    eval_modes: List[EvalMode] = Field(
        [EvalMode.GREEDY, EvalMode.STOCHASTIC],
        min_length=1,
        description="Test-time routing modes; the first one fills the table.",
    )
    stochastic_samples: int = Field(
        10, ge=1, description="Routings per test example in stochastic evaluation."
    )
    workers: int = Field(settings.WORKERS, ge=1, description="Parallel worker processes.")
    record_timings: bool = Field(
        False, description="Write wall-clock seconds into the machine report."
    )


class TopologySection(BaseModel):
    """Topology block of a model file."""

    model_config = ConfigDict(extra="forbid")

    width: int = Field(..., ge=2)
    depth: int = Field(..., ge=1)
    parent: List[Optional[int]] = Field(..., min_length=3)


class ModelFile(BaseModel):
    """Schema of a serialized model (see FORMATS.md)."""

    model_config = ConfigDict(extra="forbid")

    format: Literal["rdt-model"]
    version: int
    input_dim: int = Field(..., ge=1)
    num_classes: int = Field(..., ge=2)
    alpha_frozen: bool
    topology: TopologySection
    theta: Dict[int, List[List[float]]]
    alpha: Dict[int, List[float]]
