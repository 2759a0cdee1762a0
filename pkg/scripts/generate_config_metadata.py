import json
import os
import sys
from enum import Enum
from typing import Any, Dict, Optional, Type, Union, get_args, get_origin

# Add the project root to the sys.path to allow imports from app.models
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from app.models import CONFIG_REGISTRY, ExperimentConfig

OUTPUT_FILE = "app/data/config_metadata.json"
SCHEMA_FILE = "app/data/config_schema.json"


def get_param_info(param_type: Type) -> str:
    """Describe a field type from its docstring and, for enums, its values."""
    origin = get_origin(param_type)
    args = get_args(param_type)
    is_optional = False
    if origin is Union and type(None) in args:
        param_type = next(arg for arg in args if arg is not type(None))
        is_optional = True

    info_parts = []
    if isinstance(param_type, type) and param_type.__doc__:
        doc_lines = [line.strip() for line in param_type.__doc__.split("\n") if line.strip()]
        if doc_lines:
            info_parts.append(doc_lines[0])
            if len(doc_lines) > 1:
                info_parts.append(" ".join(doc_lines[1:]))

    if isinstance(param_type, type) and issubclass(param_type, Enum):
        possible_values = ", ".join([f"'{m.value}'" for m in param_type])
        info_parts.append(f"Possible values: {possible_values}.")

    final_info = "; ".join(filter(None, info_parts)).strip()
    if is_optional:
        final_info = f"(Optional) {final_info}"
    return final_info if final_info else str(getattr(param_type, "__name__", str(param_type)))


def generate_config_metadata() -> Dict[str, Any]:
    """Field descriptions and defaults of every registered config section."""
    metadata = []
    for section, config_class in CONFIG_REGISTRY.items():
        descriptions = config_class.get_fields_info()
        params = {}
        for field_name in config_class.get_fields():
            field_info = config_class.model_fields[field_name]
            params[field_name] = {
                "description": descriptions[field_name] or get_param_info(field_info.annotation),
                "required": field_info.is_required(),
            }
        metadata.append({"id": section, "class": config_class.__name__, "params": params})
    return {"configs": metadata}


def write_metadata(output_file: str = OUTPUT_FILE, schema_file: Optional[str] = SCHEMA_FILE) -> None:
    output_dir = os.path.dirname(output_file)
    if output_dir:
        os.makedirs(output_dir, exist_ok=True)
    with open(output_file, "w") as f:
        json.dump(generate_config_metadata(), f, indent=4)
    print(f"Generated config metadata and saved to {output_file}")

    if schema_file:
        with open(schema_file, "w") as f:
            json.dump(ExperimentConfig.model_json_schema(), f, indent=4)
        print(f"Generated experiment config schema and saved to {schema_file}")


if __name__ == "__main__":
    write_metadata()
