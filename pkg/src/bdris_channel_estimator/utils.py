from datetime import datetime
import json
from decimal import Decimal
from enum import Enum
from pathlib import Path
import re
from typing import Any, Dict, List, Union

import numpy as np


# Custom JSON encoder to handle numpy and other non-native types
class CustomJSONEncoder(json.JSONEncoder):
    def default(self, obj):
        if isinstance(obj, np.integer):
            return int(obj)
        elif isinstance(obj, np.floating):
            return float(obj)
        elif isinstance(obj, (complex, np.complexfloating)):
            return {"real": float(obj.real), "imag": float(obj.imag)}
        elif isinstance(obj, np.ndarray):
            return obj.tolist()
        elif isinstance(obj, np.bool_):
            return bool(obj)
        elif isinstance(obj, Decimal):
            return float(obj)
        elif isinstance(obj, datetime):
            return obj.isoformat()
        elif isinstance(obj, Path):
            return str(obj)
        elif isinstance(obj, Enum):
            return obj.value
        return super().default(obj)


def sanitize_json_string(value: str) -> str:
    """
    Sanitize a string value that will be included in JSON output.

    Control characters are removed so that error messages coming from
    arbitrary exceptions cannot break line-oriented consumers.

    Args:
        value: The string value to sanitize

    Returns:
        Sanitized string safe for inclusion in JSON
    """
    if value is None:
        return None

    return re.sub(r"[\x00-\x1F\x7F]", " ", value)


def sanitize_json_value(value: Any) -> Any:
    """
    Recursively sanitize values in a JSON-serializable object.

    Args:
        value: The value to sanitize (can be a dict, list, or primitive type)

    Returns:
        Sanitized value safe for JSON serialization
    """
    if isinstance(value, str):
        return sanitize_json_string(value)
    elif isinstance(value, dict):
        return {k: sanitize_json_value(v) for k, v in value.items()}
    elif isinstance(value, (list, tuple)):
        return [sanitize_json_value(item) for item in value]
    return value


def safe_json_dumps(obj: Union[Dict, List], **kwargs) -> str:
    """
    Safely convert a Python object to a JSON string with sanitization.

    Args:
        obj: The object to convert to JSON
        **kwargs: Additional arguments to pass to json.dumps

    Returns:
        A sanitized JSON string
    """
    sanitized_obj = sanitize_json_value(obj)
    return json.dumps(sanitized_obj, cls=CustomJSONEncoder, **kwargs)


def error_payload(exc: BaseException, message: str | None = None) -> dict:
    """Build the machine-readable error object used at every boundary."""
    return {"error": message or str(exc), "type": exc.__class__.__name__}


def complex_normal(
    rng: np.random.Generator, shape: int | tuple[int, ...], variance: float
) -> np.ndarray:
    """Draw circularly-symmetric complex Gaussian samples CN(0, variance)."""
    scale = np.sqrt(variance / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def trial_seed(master_seed: int, point_index: int, trial_index: int) -> int:
    """Derive an independent 64-bit seed for one (sweep point, trial) pair."""
    sequence = np.random.SeedSequence([master_seed, point_index, trial_index])
    return int(sequence.generate_state(1, dtype=np.uint64)[0])
