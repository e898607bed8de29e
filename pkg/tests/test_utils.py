"""Tests for JSON helpers, random draws and seed derivation."""

import json
from pathlib import Path

import numpy as np
import pytest

from bdris_channel_estimator.errors import (
    ConfigurationError,
    EstimationError,
    MemoryBudgetError,
    SingularBlockError,
)
from bdris_channel_estimator.utils import (
    complex_normal,
    error_payload,
    safe_json_dumps,
    sanitize_json_string,
    trial_seed,
)


def test_safe_json_dumps_handles_numpy_and_complex():
    """Numpy values, complex numbers and paths serialize."""
    text = safe_json_dumps(
        {
            "nmse": np.float64(0.25),
            "count": np.int64(3),
            "gain": 1 + 2j,
            "vector": np.arange(3),
            "path": Path("out/result.csv"),
            "ok": np.bool_(True),
        }
    )
    data = json.loads(text)
    assert data["nmse"] == 0.25
    assert data["count"] == 3
    assert data["gain"] == {"real": 1.0, "imag": 2.0}
    assert data["vector"] == [0, 1, 2]
    assert data["path"] == "out/result.csv"
    assert data["ok"] is True


def test_control_characters_are_removed():
    """Control characters never reach the JSON output."""
    assert sanitize_json_string("bad\nline\x00") == "bad line "
    assert "\\n" not in safe_json_dumps({"error": "multi\nline"})


def test_error_payload():
    """Errors become an object with message and class name."""
    payload = error_payload(ConfigurationError("seed must be non-negative"))
    assert payload == {"error": "seed must be non-negative", "type": "ConfigurationError"}
    assert error_payload(ValueError("x"), "custom")["error"] == "custom"


def test_error_hierarchy():
    """Package errors are also their closest built-in exceptions."""
    assert issubclass(ConfigurationError, ValueError)
    assert issubclass(MemoryBudgetError, MemoryError)
    assert issubclass(SingularBlockError, ArithmeticError)
    assert issubclass(MemoryBudgetError, EstimationError)
    assert SingularBlockError(2).group == 2


def test_complex_normal_variance():
    """Samples are circularly symmetric with the requested variance."""
    samples = complex_normal(np.random.default_rng(0), 100_000, 0.5)
    assert np.mean(np.abs(samples) ** 2) == pytest.approx(0.5, rel=0.02)
    assert np.var(samples.real) == pytest.approx(0.25, rel=0.03)
    assert abs(np.mean(samples)) < 0.01


def test_trial_seed_is_deterministic_and_distinct():
    """Seeds depend only on (master, point, trial)."""
    assert trial_seed(1, 2, 3) == trial_seed(1, 2, 3)
    seeds = {trial_seed(0, i, t) for i in range(4) for t in range(4)}
    assert len(seeds) == 16
    assert trial_seed(0, 0, 1) != trial_seed(1, 0, 1)
