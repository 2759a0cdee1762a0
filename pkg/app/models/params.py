"""Module with parameter validators."""

import math
from enum import Enum
from typing import Any, Tuple

from pydantic import GetCoreSchemaHandler, GetJsonSchemaHandler
from pydantic.json_schema import JsonSchemaValue
from pydantic_core import core_schema


def _parse_floats(value: Any, expected: int, name: str) -> Tuple[float, ...]:
    if isinstance(value, str):
        parts = [part.strip() for part in value.split(",") if part.strip()]
    else:
        parts = list(value)
    if len(parts) != expected:
        raise ValueError(f"{name} needs {expected} comma-separated numbers. Got: {value}")
    try:
        numbers = tuple(float(part) for part in parts)
    except (TypeError, ValueError):
        raise ValueError(f"{name} values must be numbers. Got: {value}")
    if not all(math.isfinite(number) for number in numbers):
        raise ValueError(f"{name} values must be finite. Got: {value}")
    return numbers


class Box(tuple):
    """Axis-aligned 2D box given as (x0_min, x1_min, x0_max, x1_max).

    Accepts a sequence of four numbers or a string such as '-1,-1,1,1'.
    """

    @classmethod
    def __get_pydantic_core_schema__(
        cls, source_type: Any, handler: GetCoreSchemaHandler
    ) -> core_schema.CoreSchema:
        """Return a core schema for validating boxes."""

        def validate_box(value: Any) -> Tuple[float, float, float, float]:
            x0_min, x1_min, x0_max, x1_max = _parse_floats(value, 4, "Box")
            if not (x0_min < x0_max and x1_min < x1_max):
                raise ValueError(
                    f"Box lower corner must be strictly below the upper corner. Got: {value}"
                )
            return (x0_min, x1_min, x0_max, x1_max)

        return core_schema.no_info_plain_validator_function(
            validate_box,
            serialization=core_schema.plain_serializer_function_ser_schema(list),
        )

    @classmethod
    def __get_pydantic_json_schema__(
        cls, schema: core_schema.CoreSchema, handler: GetJsonSchemaHandler
    ) -> JsonSchemaValue:
        return {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4}


class SigmaRange(tuple):
    """Interval (low, high) of cluster standard deviations, 0 < low <= high."""

    @classmethod
    def __get_pydantic_core_schema__(
        cls, source_type: Any, handler: GetCoreSchemaHandler
    ) -> core_schema.CoreSchema:
        """Return a core schema for validating sigma intervals."""

        def validate_sigma_range(value: Any) -> Tuple[float, float]:
            low, high = _parse_floats(value, 2, "Sigma range")
            if low <= 0:
                raise ValueError(f"Sigma range must be positive. Got: {value}")
            if low > high:
                raise ValueError(f"Sigma range low must not exceed high. Got: {value}")
            return (low, high)

        return core_schema.no_info_plain_validator_function(
            validate_sigma_range,
            serialization=core_schema.plain_serializer_function_ser_schema(list),
        )

    @classmethod
    def __get_pydantic_json_schema__(
        cls, schema: core_schema.CoreSchema, handler: GetJsonSchemaHandler
    ) -> JsonSchemaValue:
        return {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}


class LossName(str, Enum):
    """Enum for valid training losses."""

    SQUARE = "square"
    HINGE = "hinge"


class EvalMode(str, Enum):
    """Enum for test-time routing modes."""

    GREEDY = "greedy"
    STOCHASTIC = "stochastic"


class SamplingMode(str, Enum):
    """How training examples are visited inside an epoch."""

    # every example once, in (optionally shuffled) order
    EPOCH = "epoch"
    # N independent uniform draws, as in the plain stochastic procedure
    UNIFORM = "uniform"


class Method(str, Enum):
    """Enum for the compared methods."""

    RDT = "rdt"
    RANDOM_TREE = "random_tree"


class LeafInit(str, Enum):
    """Where the random leaf scores are centred at initialisation."""

    UNIFORM = "uniform"
    # every coordinate at 2/C - 1, the mean of the C label vectors
    LABEL_MEAN = "label_mean"
