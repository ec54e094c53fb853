"""Flat JSON run configuration shared by all subcommands."""

import json
import os
from typing import Any, Dict, Optional

from src.utils.errors import ValidationError
from src.utils.logger import get_logger

logger = get_logger(__name__)


def load_run_config(path: Optional[str]) -> Dict[str, Any]:
    """Load a flat JSON object mirroring AttnConfig and WorkloadSpec fields.

    Args:
        path: Path to the JSON file. None yields an empty config.

    Returns:
        Mapping of field name to value.

    Raises:
        ValidationError: If the file is missing, unparsable or not a flat object.
    """
    if path is None:
        return {}
    if not os.path.exists(path):
        raise ValidationError(f"Config file not found: {path}")

    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ValidationError(f"Config file {path} is not valid JSON: {e}")

    if not isinstance(data, dict):
        raise ValidationError(f"Config file {path} must hold a JSON object")
    nested = [key for key, value in data.items() if isinstance(value, (dict, list))]
    if nested and set(nested) != {"grid"}:
        raise ValidationError(f"Config must be flat, nested keys found: {nested}")

    logger.debug(f"Loaded run config from {path}", context={"keys": len(data)})
    return data
