"""Tests for beamspace peak detection and angle rotation refinement."""

import numpy as np
import pytest

from bdris_channel_estimator.bdris import bernoulli_training_schedule
from bdris_channel_estimator.channel import (
    EstimatorOptions,
    SystemConfig,
    sample_realization,
    synthesize_measurements,
)
from bdris_channel_estimator.errors import NoPeaksError
from bdris_channel_estimator.estimation.stage1 import (
    angle_rotation_refine,
    beamspace_power,
    dft_peak_detect,
    estimate_common_aoa,
    index_to_coarse_freq,
    joint_rotation_refine,
    rotation_grid,
    rotation_objective,
    split_index,
)
from bdris_channel_estimator.geometry import UpaShape, dft_grid_frequencies, upa_responses
from bdris_channel_estimator.selftest import check_half_bin_rotation
from bdris_channel_estimator.utils import complex_normal

SHAPE = UpaShape(horizontal_count=8, vertical_count=8)


def _frequency_error(a, b):
    return np.abs((np.asarray(a) - np.asarray(b) + 0.5) % 1.0 - 0.5)


def _on_grid_measurement(rng, bins, slots=16):
    z, x = dft_grid_frequencies(SHAPE)
    steering = upa_responses(SHAPE, z[bins], x[bins])
    return steering @ complex_normal(rng, (len(bins), slots), 1.0), np.column_stack([z[bins], x[bins]])


def test_single_on_grid_path_concentrates_power(rng):
    """One on-grid path puts essentially all power in one row."""
    y1, _ = _on_grid_measurement(rng, [21])
    power = beamspace_power(y1, SHAPE)
    assert power[21] / power.sum() > 0.9999


def test_known_count_finds_true_rows(rng):
    """Known-count detection returns the true DFT rows."""
    bins = [3, 28, 50]
    y1, _ = _on_grid_measurement(rng, bins)
    peaks, count = dft_peak_detect(y1, SHAPE, path_count=3)
    assert count == 3
    assert sorted(peaks) == bins


def test_threshold_detection(rng):
    """Threshold mode keeps isolated maxima above the power fraction."""
    y1, _ = _on_grid_measurement(rng, [0, 36])
    peaks, count = dft_peak_detect(y1, SHAPE, threshold_fraction=0.01)
    assert count == 2
    assert sorted(peaks) == [0, 36]


def test_zero_measurement_has_no_peaks():
    """A zero measurement is rejected."""
    with pytest.raises(NoPeaksError):
        dft_peak_detect(np.zeros((64, 4)), SHAPE, path_count=1)


def test_index_mapping():
    """1-based rows split into outer and inner indices."""
    assert split_index(1, SHAPE) == (1, 1)
    assert split_index(24, SHAPE) == (3, 8)
    assert index_to_coarse_freq(1, SHAPE) == (0.0, 0.0)
    psi, nu = index_to_coarse_freq(24, SHAPE)
    assert psi == pytest.approx(0.25)
    assert nu == pytest.approx(7 / 8 - 1)
    with pytest.raises(IndexError):
        split_index(65, SHAPE)


def test_rotation_grid_is_centred_on_zero():
    """The grid spans [-π/N, π/N) and contains zero for every size."""
    grid = rotation_grid(8, 64)
    assert grid[0] == pytest.approx(-np.pi / 8)
    assert grid[-1] < np.pi / 8
    assert grid[32] == 0.0
    odd = rotation_grid(8, 63)
    assert odd[31] == 0.0
    assert odd.min() >= -np.pi / 8 and odd.max() < np.pi / 8
    assert rotation_grid(4, 1).tolist() == [0.0]


def test_on_grid_paths_are_exact(rng):
    """Noiseless on-grid paths are refined to their true frequencies."""
    y1, truth = _on_grid_measurement(rng, [5, 19, 44, 60])
    estimate = estimate_common_aoa(y1, SHAPE, 4)
    assert estimate.path_count == 4
    for pair in truth:
        errors = _frequency_error(estimate.refined_pairs, pair).max(axis=1)
        assert errors.min() < 1e-9
    assert estimate.steering_estimate.shape == (64, 4)


def test_grid_sweeps_count_evaluations(rng):
    """Without polish or cancellation each path costs g1 + g2 evaluations."""
    y1, _ = _on_grid_measurement(rng, [5, 19, 44, 60])
    options = EstimatorOptions(rotation_polish=False, cancellation_rounds=0)
    estimate = estimate_common_aoa(y1, SHAPE, 4, options)
    assert estimate.objective_evaluations == 4 * (64 + 64)
    assert estimate_common_aoa(y1, SHAPE, 4).objective_evaluations > 4 * (64 + 64)


@pytest.mark.parametrize("grid", [(63, 63), (1, 1), (7, 64)])
def test_on_grid_paths_are_exact_for_any_grid_size(rng, grid):
    """Odd and single-point grids keep on-grid paths on their bins."""
    y1, truth = _on_grid_measurement(rng, [12, 33])
    options = EstimatorOptions(rotation_grid=grid)
    estimate = estimate_common_aoa(y1, SHAPE, 2, options)
    for pair in truth:
        assert _frequency_error(estimate.refined_pairs, pair).max(axis=1).min() < 1e-9


def test_off_grid_refinement_improves_on_dft(rng):
    """Rotation never does worse than the coarse bin beyond one search step."""
    step = 1.0 / (8 * 64)
    for _ in range(10):
        pair = rng.uniform(-0.5, 0.5, size=2)
        y1 = upa_responses(SHAPE, [pair[0]], [pair[1]]) @ complex_normal(rng, (1, 8), 1.0)
        estimate = estimate_common_aoa(y1, SHAPE, 1)
        refined = _frequency_error(estimate.refined_pairs[0], pair).max()
        coarse = _frequency_error(estimate.coarse_pairs[0], pair).max()
        assert refined <= max(coarse, step) + 1e-12
        assert refined <= step + 1e-12


def test_half_bin_offsets(rng):
    """Half-bin offsets are recovered within one rotation step."""
    error, allowed = check_half_bin_rotation(rng)
    assert error <= allowed + 1e-12


def test_joint_rotation_counts_evaluations(rng):
    """The joint 2-D search evaluates g1 * g2 offsets per path."""
    y1, truth = _on_grid_measurement(rng, [9, 40])
    options = EstimatorOptions(
        joint_rotation=True, rotation_grid=(8, 8), rotation_polish=False, cancellation_rounds=0
    )
    estimate = estimate_common_aoa(y1, SHAPE, 2, options)
    assert estimate.objective_evaluations == 2 * 64
    for pair in truth:
        assert _frequency_error(estimate.refined_pairs, pair).max(axis=1).min() < 1e-6


def test_threshold_mode_counts_paths(rng):
    """Threshold peak mode infers the number of paths."""
    y1, _ = _on_grid_measurement(rng, [2, 45])
    options = EstimatorOptions(peak_mode="threshold", peak_threshold=0.01)
    assert estimate_common_aoa(y1, SHAPE, None, options).path_count == 2


def test_desk_subspace_alignment(rng):
    """At 0 dB the estimated BS steering spans the true one."""
    config = SystemConfig.desk()
    alignments = []
    for _ in range(10):
        real = sample_realization(config, rng)
        schedule = bernoulli_training_schedule(config.ris_layout, 48, rng)
        y1 = synthesize_measurements(real, schedule, real.typical_user, rng)
        estimate = estimate_common_aoa(y1, config.bs_shape, config.bs_ris_paths, config.options)
        gram = estimate.steering_estimate.conj().T @ real.bs_steering
        alignments.append(np.max(np.abs(gram), axis=0).mean() / config.bs_shape.size)
    assert np.mean(alignments) > 0.8


def _matched_errors(estimated, truth):
    return [_frequency_error(estimated, pair).max(axis=1).min() for pair in truth]


def _equal_power_paths(rng, shape, pairs, slots=24):
    gains = complex_normal(rng, (len(pairs), slots), 1.0)
    gains /= np.linalg.norm(gains, axis=1, keepdims=True)
    pairs = np.asarray(pairs)
    return upa_responses(shape, pairs[:, 0], pairs[:, 1]) @ gains


def test_two_off_grid_paths_on_a_small_array(rng):
    """Leakage between two paths does not bias their refined frequencies."""
    shape = UpaShape(horizontal_count=4, vertical_count=4)
    truth = [(0.07, -0.19), (-0.31, 0.26)]
    y1 = _equal_power_paths(rng, shape, truth)
    estimate = estimate_common_aoa(y1, shape, 2)
    allowed = 1.0 / (2 * 4 * 64)
    assert max(_matched_errors(estimate.refined_pairs, truth)) <= allowed


def test_two_off_grid_paths_random_draws(rng):
    """Well-separated off-grid pairs are refined within half a search step."""
    allowed = 1.0 / (2 * 8 * 64)
    for _ in range(8):
        while True:
            bins = rng.integers(0, 8, size=(2, 2))
            gap = np.abs(bins[0] - bins[1])
            if np.all(np.minimum(gap, 8 - gap) >= 2):
                break
        truth = (bins + rng.uniform(-0.25, 0.25, size=(2, 2))) / 8
        truth = (truth + 0.5) % 1.0 - 0.5
        y1 = _equal_power_paths(rng, SHAPE, truth)
        estimate = estimate_common_aoa(y1, SHAPE, 2)
        assert max(_matched_errors(estimate.refined_pairs, truth)) <= allowed


def test_cancellation_rounds_reduce_leakage_bias(rng):
    """Refining against the other path's fit beats a single isolated sweep."""
    shape = UpaShape(horizontal_count=4, vertical_count=4)
    truth = [(0.07, -0.19), (-0.31, 0.26)]
    y1 = _equal_power_paths(rng, shape, truth)
    single = estimate_common_aoa(y1, shape, 2, EstimatorOptions(cancellation_rounds=0))
    rounds = estimate_common_aoa(y1, shape, 2)
    assert max(_matched_errors(rounds.refined_pairs, truth)) <= max(
        _matched_errors(single.refined_pairs, truth)
    )


@pytest.mark.parametrize("refine", [angle_rotation_refine, joint_rotation_refine])
def test_rotation_never_lowers_the_beam_power(rng, refine):
    """The chosen rotation steers at least as much power as no rotation."""
    for _ in range(5):
        y1 = complex_normal(rng, (64, 6), 1.0)
        peak = (int(rng.integers(1, 9)), int(rng.integers(1, 9)))
        anchor = index_to_coarse_freq((peak[0] - 1) * 8 + peak[1], SHAPE)
        d_psi, d_nu, _ = refine(y1, peak, SHAPE, (16, 16))
        rotated = (anchor[0] - d_psi / (2 * np.pi), anchor[1] - d_nu / (2 * np.pi))
        before = rotation_objective(y1, SHAPE, anchor)
        assert rotation_objective(y1, SHAPE, rotated) >= before * (1 - 1e-12)
