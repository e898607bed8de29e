"""Shared fixtures for the estimator tests."""

import numpy as np
import pytest

from bdris_channel_estimator.bdris import bernoulli_training_schedule
from bdris_channel_estimator.channel import (
    SystemConfig,
    sample_realization,
    synthesize_measurements,
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def desk_config():
    return SystemConfig.desk()


@pytest.fixture
def noiseless_desk_config():
    """Desk scenario with every angle on its grid and no noise."""
    return SystemConfig.desk(on_grid=True, noise_variance=0.0)


@pytest.fixture
def tiny_config():
    """N=4, M=4, G=2, one user with one path, noiseless and on-grid."""
    return SystemConfig(
        bs_shape={"horizontal_count": 2, "vertical_count": 2},
        ris_layout={"shape": {"horizontal_count": 2, "vertical_count": 2}, "group_count": 2},
        user_count=1,
        bs_ris_paths=1,
        user_ris_paths=(1,),
        pilot_lengths=(16,),
        on_grid=True,
        noise_variance=0.0,
    )


@pytest.fixture
def noiseless_scenario(noiseless_desk_config, rng):
    """Realization, schedules and measurements of a noiseless on-grid desk draw."""
    config = noiseless_desk_config
    real = sample_realization(config, rng)
    order = real.service_order
    schedules = {
        k: bernoulli_training_schedule(config.ris_layout, slots, rng)
        for k, slots in zip(order, config.pilot_lengths)
    }
    measurements = {k: synthesize_measurements(real, schedules[k], k, rng) for k in order}
    return config, real, schedules, measurements
