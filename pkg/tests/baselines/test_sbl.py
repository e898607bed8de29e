"""Tests for the sparse Bayesian learning baseline."""

import numpy as np
import pytest

from bdris_channel_estimator.baselines import run_sbl, sbl_recover
from bdris_channel_estimator.channel import cascaded_matrix
from bdris_channel_estimator.errors import DimensionError
from bdris_channel_estimator.estimation import estimate_common_aoa
from bdris_channel_estimator.selftest import check_sbl_evidence
from bdris_channel_estimator.utils import complex_normal


def test_zero_measurement():
    """A zero measurement returns a zero posterior without iterating."""
    solution = sbl_recover(np.zeros(8), np.ones((8, 12)))
    assert not np.any(solution.mean)
    assert solution.iterations == 0
    assert solution.converged


def test_single_atom_dominates(rng):
    """The posterior mean concentrates on the active atom."""
    phi = complex_normal(rng, (20, 60), 1.0)
    x = np.zeros(60, dtype=complex)
    x[7] = 2.0 - 1.0j
    y = phi @ x + complex_normal(rng, 20, 1e-6)
    solution = sbl_recover(y, phi, max_iterations=200)
    assert int(np.argmax(np.abs(solution.mean))) == 7
    assert np.linalg.norm(solution.mean - x) / np.linalg.norm(x) < 0.2
    assert solution.noise_variance > 0.0


def test_evidence_never_decreases(rng):
    """EM iterations do not lower the marginal likelihood."""
    assert check_sbl_evidence(rng, trials=3) <= 1e-9


def test_iteration_cap(rng):
    """A tight cap stops early and reports non-convergence."""
    phi = complex_normal(rng, (10, 30), 1.0)
    solution = sbl_recover(complex_normal(rng, 10, 1.0), phi, max_iterations=2, tolerance=1e-15)
    assert solution.iterations == 2
    assert not solution.converged
    assert len(solution.evidence_history) == 2


def test_dimension_check(rng):
    """Measurement length must match the dictionary rows."""
    with pytest.raises(DimensionError):
        sbl_recover(np.ones(5), complex_normal(rng, (6, 10), 1.0))


def test_run_sbl_shapes(noiseless_scenario):
    """Every user gets a finite N x M̄²G estimate within the iteration budget."""
    config, real, schedules, measurements = noiseless_scenario
    k = real.typical_user
    aoa = estimate_common_aoa(measurements[k], config.bs_shape, config.bs_ris_paths, config.options)
    result = run_sbl(measurements, schedules, config, aoa)
    assert result.estimator == "sbl"
    for user, estimate in result.estimates.items():
        assert estimate.shape == cascaded_matrix(real, user).shape
        assert np.all(np.isfinite(estimate))
        assert 1 <= result.iterations[user] <= config.options.sbl_max_iterations


def test_unconverged_run_keeps_best_evidence_iterate(rng):
    """Without convergence the iterate with the highest evidence is returned."""
    phi = complex_normal(rng, (16, 40), 1.0)
    x = np.zeros(40, dtype=complex)
    x[[3, 21]] = [1.0, -0.5j]
    y = phi @ x + complex_normal(rng, 16, 1e-2)
    solution = sbl_recover(y, phi, max_iterations=4, tolerance=1e-15)
    assert not solution.converged
    best = int(np.argmax(solution.evidence_history)) + 1
    assert solution.best_iteration == best
    truncated = sbl_recover(y, phi, max_iterations=best, tolerance=1e-15)
    np.testing.assert_allclose(solution.mean, truncated.mean)
    assert solution.noise_variance == pytest.approx(truncated.noise_variance)
