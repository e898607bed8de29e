"""Tests for trials, sweeps, campaign CSV output and campaign files."""

import numpy as np
import pytest
from pydantic import ValidationError

from bdris_channel_estimator.channel import SystemConfig, pilot_split
from bdris_channel_estimator.errors import ConfigurationError, DimensionError
from bdris_channel_estimator.harness import (
    CSV_HEADER,
    CampaignSpec,
    apply_sweep,
    campaign_csv,
    compare_paired,
    load_campaign_file,
    nmse,
    run_campaign,
    run_trial,
)


def test_nmse_reference_values(rng):
    """Exact, zero and doubled estimates give 0, 1 and 1."""
    truth = {0: rng.standard_normal((4, 6)), 2: rng.standard_normal((4, 6))}
    assert nmse(truth, truth) == 0.0
    assert nmse({k: np.zeros_like(v) for k, v in truth.items()}, truth) == pytest.approx(1.0)
    assert nmse({k: 2 * v for k, v in truth.items()}, truth) == pytest.approx(1.0)


def test_nmse_rejects_mismatches():
    """User sets and shapes must agree and the truth must carry energy."""
    with pytest.raises(DimensionError):
        nmse({0: np.ones(2)}, {1: np.ones(2)})
    with pytest.raises(DimensionError):
        nmse({0: np.ones(2)}, {0: np.ones(3)})
    with pytest.raises(ZeroDivisionError):
        nmse({0: np.ones(2)}, {0: np.zeros(2)})


def test_apply_sweep(desk_config):
    """Each sweep axis updates the matching field."""
    assert apply_sweep(desk_config, "snr_db", 5).snr_db == 5.0
    fixed = desk_config.with_updates(noise_variance=1.0)
    assert apply_sweep(fixed, "snr_db", 5).noise_variance is None
    typical, other = pilot_split(28, desk_config.user_count)
    assert apply_sweep(desk_config, "pilot_budget", 28).pilot_lengths == (typical, other, other)
    assert apply_sweep(desk_config, "user_paths", 1).user_ris_paths == (1, 1, 1)
    assert apply_sweep(desk_config, "bs_ris_paths", 3).bs_ris_paths == 3
    assert apply_sweep(desk_config, "bs_antennas", 36).bs_shape.size == 36
    assert apply_sweep(desk_config, "group_count", 16).ris_layout.group_size == 1
    resized = apply_sweep(desk_config, "ris_antennas", 36)
    assert resized.ris_layout.element_count == 36
    assert resized.ris_layout.group_count == 4
    with pytest.raises(ConfigurationError):
        apply_sweep(desk_config, "bs_antennas", 20)
    with pytest.raises(ConfigurationError):
        apply_sweep(desk_config, "frequency", 1)


def test_run_trial_is_deterministic(noiseless_desk_config):
    """A seed reproduces the trial and noiseless estimates are exact."""
    first = run_trial(noiseless_desk_config, 7)
    second = run_trial(noiseless_desk_config, 7)
    assert first.nmse == second.nmse
    assert first.typical_user == second.typical_user
    assert first.nmse["proposed"] < 1e-6
    assert first.errors == {}


def test_run_trial_records_failures(desk_config):
    """A failing estimator gets a NaN NMSE without stopping the others."""
    config = desk_config.with_updates(options={"element_budget": 10.0})
    result = run_trial(config, 3, ("proposed", "direct_omp"))
    assert np.isnan(result.nmse["direct_omp"])
    assert result.errors["direct_omp"]["type"] == "MemoryBudgetError"
    assert np.isfinite(result.nmse["proposed"])


def test_run_trial_unknown_estimator(desk_config):
    """Only known estimators are accepted."""
    with pytest.raises(ConfigurationError):
        run_trial(desk_config, 0, ("ls",))


def test_campaign_spec_defaults_and_validation():
    """Default sweep values apply and invalid specs are refused."""
    spec = CampaignSpec(sweep_param="group_count")
    assert spec.values == (1, 4, 16)
    assert spec.system == SystemConfig.desk()
    with pytest.raises(ValidationError):
        CampaignSpec(trials=0)
    with pytest.raises(ValidationError):
        CampaignSpec(estimators=())
    with pytest.raises(ValidationError):
        CampaignSpec(seed=-1)


def test_campaign_csv_is_reproducible(tmp_path):
    """Without timing the CSV output is byte-identical across runs."""
    spec = CampaignSpec(
        sweep_param="snr_db",
        sweep_values=(0.0, 10.0),
        trials=2,
        seed=5,
        threads=1,
        record_timing=False,
        keep_trials=True,
        out=tmp_path / "results" / "snr.csv",
    )
    first = run_campaign(spec)
    second = run_campaign(spec.model_copy(update={"out": None}))
    text = campaign_csv(first)
    assert text == campaign_csv(second)
    assert (tmp_path / "results" / "snr.csv").read_text() == text

    lines = text.splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    assert len(lines) == 3
    assert lines[1].startswith("snr_db,0,proposed,2,")
    assert lines[1].endswith(",0.0000000000e+00")
    assert first.nmse_samples(10.0, "proposed").shape == (2,)
    assert [row.sweep_value for row in first.rows] == [0.0, 10.0]


def test_load_campaign_file(tmp_path):
    """System, estimator and campaign sections map onto the spec."""
    path = tmp_path / "campaign.toml"
    path.write_text(
        """
[system]
preset = "desk"
snr_db = 5.0
user_ris_paths = [1]

[estimator]
peak_mode = "threshold"
peak_threshold = 0.1

[campaign]
sweep_param = "pilot_budget"
trials = 3
estimators = ["proposed", "sbl"]
"""
    )
    spec = load_campaign_file(path, seed=9, trials=None)
    assert spec.system.snr_db == 5.0
    assert spec.system.user_ris_paths == (1, 1, 1)
    assert spec.system.options.peak_mode == "threshold"
    assert spec.sweep_param == "pilot_budget"
    assert spec.trials == 3
    assert spec.seed == 9
    assert spec.estimators == ("proposed", "sbl")


@pytest.mark.parametrize(
    "content",
    [
        "[extras]\nx = 1\n",
        '[system]\npreset = "lab"\n',
        "[campaign]\ntrials = 0\n",
        "[system]\nuser_count = [\n",
    ],
)
def test_bad_campaign_files(tmp_path, content):
    """Malformed campaign files raise ConfigurationError."""
    path = tmp_path / "bad.toml"
    path.write_text(content)
    with pytest.raises(ConfigurationError):
        load_campaign_file(path)


def test_missing_campaign_file(tmp_path):
    """A missing file is a configuration problem."""
    with pytest.raises(ConfigurationError):
        load_campaign_file(tmp_path / "absent.toml")


def test_compare_paired():
    """Consistently smaller errors give a small one-sided p-value."""
    first = np.linspace(0.1, 1.0, 10)
    second = first + np.linspace(0.5, 1.5, 10)
    _, p_value = compare_paired(first, second)
    assert p_value < 0.01
    _, p_reverse = compare_paired(second, first)
    assert p_reverse > 0.5
    with_nan = np.append(first, np.nan)
    _, p_nan = compare_paired(with_nan, np.append(second, 0.0))
    assert p_nan == pytest.approx(p_value)
    with pytest.raises(DimensionError):
        compare_paired(first, second[:5])


def _small_campaign(**updates):
    spec = CampaignSpec(
        sweep_param="snr_db",
        sweep_values=(0.0, 10.0),
        trials=3,
        seed=11,
        threads=1,
        record_timing=False,
        keep_trials=True,
    )
    return spec.model_copy(update=updates)


def test_campaign_does_not_depend_on_worker_count():
    """Two workers give the same rows and trials as one."""
    serial = run_campaign(_small_campaign())
    parallel = run_campaign(_small_campaign(threads=2))
    assert [t.seed for _, t in serial.trials] == [t.seed for _, t in parallel.trials]
    for (_, a), (_, b) in zip(serial.trials, parallel.trials):
        assert a.nmse["proposed"] == pytest.approx(b.nmse["proposed"], rel=1e-9)
    for a, b in zip(serial.rows, parallel.rows):
        assert (a.sweep_value, a.estimator, a.trials) == (b.sweep_value, b.estimator, b.trials)
        assert a.nmse_mean == pytest.approx(b.nmse_mean, rel=1e-9)


def test_common_random_numbers_pair_the_sweep_points():
    """Trial t uses the same seed at every sweep point unless disabled."""
    paired = run_campaign(_small_campaign())
    seeds = {v: [t.seed for w, t in paired.trials if w == v] for v in (0.0, 10.0)}
    assert seeds[0.0] == seeds[10.0]
    independent = run_campaign(_small_campaign(common_random_numbers=False))
    seeds = {v: [t.seed for w, t in independent.trials if w == v] for v in (0.0, 10.0)}
    assert set(seeds[0.0]).isdisjoint(seeds[10.0])
