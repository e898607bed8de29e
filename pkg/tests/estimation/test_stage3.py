"""Tests for the common part, HBOMP and cascaded reconstruction."""

from dataclasses import replace

import numpy as np
import pytest

from bdris_channel_estimator.bdris import bernoulli_training_schedule
from bdris_channel_estimator.channel import (
    cascaded_columns,
    cascaded_matrix,
    sample_realization,
    synthesize_measurements,
)
from bdris_channel_estimator.errors import DimensionError, EstimationError, ZeroMeasurementError
from bdris_channel_estimator.estimation import build_common_part, run_protocol
from bdris_channel_estimator.estimation.stage3 import (
    CommonPart,
    HbompDictionary,
    estimate_other_user,
    hbomp,
    kronecker_swap,
    rank_blocks,
    reconstruct_cascaded,
)
from bdris_channel_estimator.geometry import SpatialFrequencyPair, rearranged_upa_responses
from bdris_channel_estimator.selftest import check_hbomp_block, check_stage3_factorization
from bdris_channel_estimator.sparse import SparseSolution
from bdris_channel_estimator.utils import complex_normal


def _true_common_part(config, real, r=0, scale=1.0):
    """Common part built from ground truth with ``β̄ = scale``."""
    deltas = real.ris_aod - real.ris_aod[r]
    return CommonPart(
        gains=scale * real.bs_ris_gains,
        delta_steering=rearranged_upa_responses(config.ris_layout, deltas[:, 0], deltas[:, 1]),
        reference_aod=SpatialFrequencyPair(*real.ris_aod[r]),
        steering_estimate=real.bs_steering,
        delta_pairs=deltas,
    )


def test_kronecker_swap(rng):
    """x ⊗ y becomes y ⊗ x."""
    x = complex_normal(rng, 3, 1.0)
    y = complex_normal(rng, 4, 1.0)
    np.testing.assert_allclose(kronecker_swap(np.kron(x, y), 3, 4), np.kron(y, x))


def test_true_common_part_gives_bs_ris_channel(desk_config, rng):
    """(1/β̄) H_s Diag(conj(a_r)) is the BS-RIS channel."""
    real = sample_realization(desk_config, rng)
    beta_bar = 0.3 - 0.7j
    common = _true_common_part(desk_config, real, r=1, scale=beta_bar)
    assert common.path_count == desk_config.bs_ris_paths
    h = common.bs_ris_channel(real.ris_steering[:, 1], beta_bar)
    np.testing.assert_allclose(h, real.bs_ris_channel, atol=1e-12 * np.abs(h).max())


def test_stage3_factorization(rng):
    """The stacked common-part model reproduces H Φ h_k."""
    assert check_stage3_factorization(rng, trials=12) < 1e-9


def test_hbomp_dictionary_matches_materialized_blocks(desk_config, rng):
    """Implicit correlations and norms agree with explicit blocks."""
    real = sample_realization(desk_config, rng)
    common = _true_common_part(desk_config, real)
    schedule = bernoulli_training_schedule(desk_config.ris_layout, 5, rng)
    block_dict, atom_dict = desk_config.aod_dictionary(), desk_config.user_dictionary()
    dictionary = HbompDictionary(common, schedule, block_dict, atom_dict)
    assert dictionary.rows == 5 * desk_config.bs_ris_paths
    assert dictionary.block_count == block_dict.size
    y = complex_normal(rng, dictionary.rows, 1.0)
    correlations = dictionary.block_correlations(y)
    norms = dictionary.block_column_norms()
    for j in (0, 17, block_dict.size - 1):
        block = dictionary.block(j)
        assert block.shape == (dictionary.rows, atom_dict.size)
        np.testing.assert_allclose(correlations[j], np.abs(block.conj().T @ y), rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(norms[j], np.linalg.norm(block, axis=0), rtol=1e-9, atol=1e-12)


def test_reconstruction_from_true_support(noiseless_desk_config, rng):
    """The true block and user atoms rebuild every cascaded column."""
    config = noiseless_desk_config
    real = sample_realization(config, rng)
    block_dict, atom_dict = config.aod_dictionary(), config.user_dictionary()
    r, k = 1, 2
    beta_bar = real.user_gains[k][0]
    common = _true_common_part(config, real, r=r, scale=beta_bar)
    block_index = block_dict.nearest_column(SpatialFrequencyPair(*(-real.ris_aod[r])))
    support = [atom_dict.nearest_column(tuple(pair)) for pair in real.user_aoa[k]]
    solution = SparseSolution(support, real.user_gains[k] / beta_bar, 0.0, [0.0])

    user_channel, columns, cascaded = reconstruct_cascaded(
        block_index, solution, common, block_dict, atom_dict, config.ris_layout
    )
    expected = real.user_channel(k) / beta_bar
    np.testing.assert_allclose(user_channel, expected, atol=1e-12 * np.abs(expected).max())
    q = cascaded_columns(real, k)
    np.testing.assert_allclose(columns, q, atol=1e-10 * np.abs(q).max())
    g = cascaded_matrix(real, k)
    np.testing.assert_allclose(cascaded, g, atol=1e-10 * np.abs(g).max())


def test_hbomp_selects_reference_block(rng):
    """Noiseless HBOMP picks the a_M(-ω_r, -μ_r) block with one and four groups."""
    assert check_hbomp_block(rng, trials=3) == 0.0


def test_hbomp_rejects_bad_measurements(desk_config, rng):
    """Zero or wrongly sized measurements are refused."""
    real = sample_realization(desk_config, rng)
    schedule = bernoulli_training_schedule(desk_config.ris_layout, 4, rng)
    dictionary = HbompDictionary(
        _true_common_part(desk_config, real),
        schedule,
        desk_config.aod_dictionary(),
        desk_config.user_dictionary(),
    )
    with pytest.raises(ZeroMeasurementError):
        hbomp(np.zeros(dictionary.rows), dictionary, 2)
    with pytest.raises(DimensionError):
        hbomp(np.ones(dictionary.rows + 1), dictionary, 2)


def test_common_part_needs_reference_departure(noiseless_scenario):
    """A typical-user estimate without atoms cannot seed Stage III."""
    config, real, schedules, measurements = noiseless_scenario
    bundle = run_protocol(measurements, schedules, config, real.typical_user)
    empty = replace(bundle.typical, reference_aod=None)
    with pytest.raises(EstimationError):
        build_common_part(empty, bundle.aoa, config)


def test_common_part_scale(noiseless_scenario):
    """Λ_s is the conjugated first coefficient times the gain ratios."""
    config, real, schedules, measurements = noiseless_scenario
    bundle = run_protocol(measurements, schedules, config, real.typical_user)
    typical = bundle.typical
    common = bundle.common
    np.testing.assert_allclose(
        common.gains, np.conj(typical.atom_coefficients[0]) * typical.gain_ratios
    )
    np.testing.assert_allclose(common.delta_pairs, typical.delta_pairs)


def _other_user_draw(config, rng):
    real = sample_realization(config, rng)
    k = real.service_order[1]
    schedule = bernoulli_training_schedule(config.ris_layout, config.pilot_lengths[1], rng)
    return real, k, schedule, synthesize_measurements(real, schedule, k, rng)


def test_user_gain_scale_cancels(desk_config, rng):
    """Rescaling the common part by β̄ leaves the cascaded estimate unchanged."""
    real, k, schedule, yk = _other_user_draw(desk_config, rng)
    sparsity = desk_config.user_ris_paths[k]
    commons = [_true_common_part(desk_config, real, scale=s) for s in (1.0, 2.5 - 4.0j)]
    estimates = [
        estimate_other_user(yk, k, common, schedule, desk_config, sparsity) for common in commons
    ]
    assert estimates[0].block_index == estimates[1].block_index
    assert estimates[0].solution.support == estimates[1].solution.support
    np.testing.assert_allclose(
        estimates[1].cascaded, estimates[0].cascaded, rtol=1e-8, atol=1e-12 * np.abs(yk).max()
    )


def test_stage3_on_the_typical_user_matches_stage2(noiseless_scenario):
    """The typical user's own Stage III estimate agrees with its Stage II one."""
    config, real, schedules, measurements = noiseless_scenario
    typical = real.typical_user
    bundle = run_protocol(measurements, schedules, config, typical)
    again = estimate_other_user(
        measurements[typical],
        typical,
        bundle.common,
        schedules[typical],
        config,
        config.user_ris_paths[typical],
    )
    g = bundle.typical.cascaded
    np.testing.assert_allclose(again.cascaded, g, atol=1e-8 * np.abs(g).max())


def test_block_shortlist_finds_the_true_block(noiseless_desk_config, rng):
    """Fitting the best-ranked blocks recovers the true departure block exactly."""
    config = noiseless_desk_config
    real, k, schedule, yk = _other_user_draw(config, rng)
    beta_bar = real.user_gains[k][0]
    common = _true_common_part(config, real, r=0, scale=beta_bar)
    dictionary = HbompDictionary(
        common, schedule, config.aod_dictionary(), config.user_dictionary()
    )
    stacked = (real.bs_steering.conj().T @ yk / real.bs_steering.shape[0]).T.reshape(-1)
    order = rank_blocks(stacked, dictionary)
    assert sorted(order.tolist()) == list(range(dictionary.block_count))
    expected = config.aod_dictionary().nearest_column(SpatialFrequencyPair(*(-real.ris_aod[0])))
    best, solution = hbomp(stacked, dictionary, config.user_ris_paths[k], candidates=16)
    assert best == expected
    assert solution.residual_norm < 1e-10 * np.linalg.norm(stacked)
