"""
Scenario and Channel Model
==========================

Scenario configuration, Saleh-Valenzuela channel realizations, the equivalent
cascaded-channel forms and noisy pilot measurements.

For user ``k`` the cascaded channel is ``G_k = A_N (β_k^T ⊗ Λ) B_k`` with
``N`` rows and ``M̄²G`` columns, so that the received training block is
``Y_k = √p G_k Θ_k + N_k``. Equivalently ``G_k = A_N Q_k^H`` where column
``l`` of ``Q_k`` is ``q_{l,k}``.
"""

from dataclasses import dataclass
from math import ceil, log
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .bdris import ScatteringMatrix, TrainingSchedule
from .config import logger, settings
from .errors import ConfigurationError, DimensionError
from .geometry import (
    AngularDictionary,
    GroupLayout,
    UpaShape,
    cached_dictionary,
    dft_grid_frequencies,
    rearranged_upa_responses,
    upa_responses,
)
from .utils import complex_normal

# Average per-user budgets with the allocation used in the published evaluation
PUBLISHED_PILOT_SPLITS: dict[int, tuple[int, int]] = {28: (48, 24), 14: (29, 11)}


class GridSize(BaseModel):
    """Vertical x horizontal size of an angular grid."""

    model_config = ConfigDict(frozen=True)

    vertical: int = Field(..., ge=1)
    horizontal: int = Field(..., ge=1)


class EstimatorOptions(BaseModel):
    """Algorithm knobs shared by the estimators."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    rotation_grid: tuple[int, int] = (64, 64)
    rotation_polish: bool = True
    joint_rotation: bool = False
    peak_mode: Literal["known", "threshold"] = "known"
    peak_threshold: float = Field(0.2, gt=0, le=1)
    peak_isolation: bool = True
    delta_grid: tuple[int, int] | None = None
    propagation: Literal["correlation", "per_column"] = "correlation"
    stopping: Literal["sparsity", "residual"] = "sparsity"
    residual_threshold: float | None = Field(None, ge=0)
    omp_branches: int = Field(8, ge=1)
    omp_max_leaves: int = Field(64, ge=1)
    hbomp_candidates: int = Field(16, ge=1)
    cancellation_rounds: int = Field(6, ge=0)
    sbl_max_iterations: int = Field(50, ge=1)
    sbl_tolerance: float = Field(1e-6, gt=0)
    element_budget: float = Field(default_factory=lambda: settings.ELEMENT_BUDGET, gt=0)

    @field_validator("rotation_grid", "delta_grid")
    @classmethod
    def _positive_grid(cls, value):
        if value is not None and min(value) < 1:
            raise ValueError(f"grid sizes must be positive, got {value}")
        return value


class SystemConfig(BaseModel):
    """Every dimension, power and grid of one simulated scenario.

    The defaults reproduce the published evaluation setup; ``desk()`` gives the
    reduced scenario used for fast checks.
    """

    model_config = ConfigDict(frozen=True, extra="forbid", validate_default=True)

    bs_shape: UpaShape = UpaShape(horizontal_count=8, vertical_count=8)
    ris_layout: GroupLayout = GroupLayout(
        shape=UpaShape(horizontal_count=6, vertical_count=6), group_count=4
    )
    user_count: int = Field(5, ge=1)
    bs_ris_paths: int = Field(4, ge=1)
    user_ris_paths: tuple[int, ...] = (3,)
    transmit_power: float = Field(1.0, gt=0)
    snr_db: float | None = 0.0
    noise_variance: float | None = Field(None, ge=0)
    bs_ris_distance: float = Field(100.0, gt=0)
    ris_user_distance: float = Field(10.0, gt=0)
    user_cluster_radius: float = Field(1.0, ge=0)
    carrier_frequency_hz: float = Field(28e9, gt=0)
    pilot_lengths: tuple[int, ...] = (48, 24)
    user_grid: GridSize | None = None
    aod_grid: GridSize | None = None
    on_grid: bool = False
    ris_on_grid: bool = False
    rng_seed: int = Field(0, ge=0)
    options: EstimatorOptions = Field(default_factory=EstimatorOptions)

    @field_validator("user_ris_paths")
    @classmethod
    def _broadcast_paths(cls, value, info):
        count = info.data.get("user_count", 1)
        if len(value) == 1:
            value = value * count
        if len(value) != count or min(value) < 1:
            raise ValueError(f"need {count} positive user path counts, got {value}")
        return value

    @field_validator("pilot_lengths")
    @classmethod
    def _broadcast_pilots(cls, value, info):
        count = info.data.get("user_count", 1)
        if len(value) == 1:
            value = value * count
        elif len(value) == 2 and count > 2:
            value = (value[0],) + (value[1],) * (count - 1)
        if len(value) != count or min(value) < 1:
            raise ValueError(f"need {count} positive pilot lengths, got {value}")
        return value

    @model_validator(mode="after")
    def _check_grids(self) -> "SystemConfig":
        shape = self.ris_layout.shape
        for name, grid in (("user_grid", self.user_grid), ("aod_grid", self.aod_grid)):
            if grid and (
                grid.vertical < shape.vertical_count
                or grid.horizontal < shape.horizontal_count
            ):
                raise ValueError(f"{name} {grid} is smaller than the RIS array")
        return self

    @classmethod
    def desk(cls, **overrides) -> "SystemConfig":
        """Reduced scenario: N=16, M=16, G=4, K=3, L=2, J=2."""
        base = {
            "bs_shape": {"horizontal_count": 4, "vertical_count": 4},
            "ris_layout": {
                "shape": {"horizontal_count": 4, "vertical_count": 4},
                "group_count": 4,
            },
            "user_count": 3,
            "bs_ris_paths": 2,
            "user_ris_paths": (2,),
            "pilot_lengths": (48, 24),
        }
        base.update(overrides)
        return cls.model_validate(base)

    def with_updates(self, **updates) -> "SystemConfig":
        """Validated copy with some fields replaced."""
        data = self.model_dump()
        data.update(updates)
        try:
            return SystemConfig.model_validate(data)
        except ValueError as e:
            raise ConfigurationError(str(e)) from e

    @property
    def effective_noise_variance(self) -> float:
        if self.noise_variance is not None:
            return self.noise_variance
        if self.snr_db is None:
            return 0.0
        return snr_to_noise_variance(
            self.snr_db,
            self.bs_ris_distance,
            self.ris_user_distance,
            self.transmit_power,
        )

    @property
    def user_grid_size(self) -> GridSize:
        shape = self.ris_layout.shape
        return self.user_grid or GridSize(
            vertical=2 * shape.vertical_count, horizontal=2 * shape.horizontal_count
        )

    @property
    def aod_grid_size(self) -> GridSize:
        shape = self.ris_layout.shape
        return self.aod_grid or GridSize(
            vertical=2 * shape.vertical_count, horizontal=2 * shape.horizontal_count
        )

    @property
    def delta_grid_size(self) -> tuple[int, int]:
        if self.options.delta_grid is not None:
            return self.options.delta_grid
        aod = self.aod_grid_size
        return 4 * aod.vertical, 4 * aod.horizontal

    def user_dictionary(self) -> AngularDictionary:
        """Dictionary over user-side RIS angles (``A_1`` / ``Ã_2``)."""
        grid = self.user_grid_size
        return cached_dictionary(self.ris_layout, grid.vertical, grid.horizontal)

    def aod_dictionary(self) -> AngularDictionary:
        """Dictionary over RIS angles of departure (``A_2`` / ``Ã_1``)."""
        grid = self.aod_grid_size
        return cached_dictionary(self.ris_layout, grid.vertical, grid.horizontal)


def snr_to_noise_variance(
    snr_db: float, bs_ris_distance: float, ris_user_distance: float, transmit_power: float
) -> float:
    """Noise variance for an SNR defined on the nominal large-scale path loss."""
    reference = 1e-6 * bs_ris_distance**-2.2 * ris_user_distance**-2.8 * transmit_power
    return reference / 10 ** (snr_db / 10)


def pilot_lower_bounds(config: SystemConfig) -> tuple[int, int]:
    """Recommended (typical, other) pilot lengths with unit constants."""
    m = config.ris_layout.element_count
    j = max(config.user_ris_paths)
    typical = ceil(j * log(16 * m**2))
    other = ceil((j + 1) * log(4 * m) / config.bs_ris_paths)
    return typical, other


def pilot_split(average_budget: int, user_count: int = 5) -> tuple[int, int]:
    """Map an average per-user pilot budget to ``(τ_1, τ_k)``."""
    if average_budget < 1:
        raise ConfigurationError(f"pilot budget must be positive, got {average_budget}")
    if average_budget in PUBLISHED_PILOT_SPLITS:
        return PUBLISHED_PILOT_SPLITS[average_budget]
    other = max(1, round(6 * average_budget / 7))
    typical = 2 * other
    logger.debug(
        f"Pilot budget {average_budget} over {user_count} users -> ({typical}, {other})"
    )
    return typical, other


@dataclass(frozen=True)
class ChannelRealization:
    """Ground-truth angles, gains and steering matrices of one channel draw.

    Angle arrays hold ``(vertical, horizontal)`` spatial frequency pairs per
    row: ``(ψ_l, ν_l)`` at the BS, ``(ω_l, μ_l)`` at the RIS towards the BS and
    ``(φ_{k,j}, θ_{k,j})`` at the RIS towards user ``k``.
    """

    config: SystemConfig
    bs_aoa: np.ndarray
    ris_aod: np.ndarray
    bs_ris_gains: np.ndarray
    user_aoa: tuple[np.ndarray, ...]
    user_gains: tuple[np.ndarray, ...]
    user_distances: np.ndarray
    bs_steering: np.ndarray
    ris_steering: np.ndarray
    user_steering: tuple[np.ndarray, ...]

    @classmethod
    def from_parameters(
        cls,
        config: SystemConfig,
        bs_aoa,
        ris_aod,
        bs_ris_gains,
        user_aoa,
        user_gains,
        user_distances=None,
    ) -> "ChannelRealization":
        """Assemble a realization, building every steering matrix."""
        layout = config.ris_layout
        bs_aoa = np.atleast_2d(np.asarray(bs_aoa, dtype=float))
        ris_aod = np.atleast_2d(np.asarray(ris_aod, dtype=float))
        user_aoa = tuple(np.atleast_2d(np.asarray(a, dtype=float)) for a in user_aoa)
        if user_distances is None:
            user_distances = np.full(len(user_aoa), config.ris_user_distance)
        return cls(
            config=config,
            bs_aoa=bs_aoa,
            ris_aod=ris_aod,
            bs_ris_gains=np.asarray(bs_ris_gains, dtype=complex),
            user_aoa=user_aoa,
            user_gains=tuple(np.asarray(b, dtype=complex) for b in user_gains),
            user_distances=np.asarray(user_distances, dtype=float),
            bs_steering=upa_responses(config.bs_shape, bs_aoa[:, 0], bs_aoa[:, 1]),
            ris_steering=rearranged_upa_responses(layout, ris_aod[:, 0], ris_aod[:, 1]),
            user_steering=tuple(
                rearranged_upa_responses(layout, a[:, 0], a[:, 1]) for a in user_aoa
            ),
        )

    @property
    def user_count(self) -> int:
        return len(self.user_gains)

    @property
    def lambda_matrix(self) -> np.ndarray:
        return np.diag(self.bs_ris_gains)

    @property
    def bs_ris_channel(self) -> np.ndarray:
        """``H = A_N Λ A_M^H`` (``N x M``, RIS columns rearranged)."""
        return (self.bs_steering * self.bs_ris_gains) @ self.ris_steering.conj().T

    def user_channel(self, user: int) -> np.ndarray:
        """``h_k = A_{M,k} β_k``."""
        return self.user_steering[user] @ self.user_gains[user]

    @property
    def typical_user(self) -> int:
        """The user closest to the RIS."""
        return int(np.argmin(self.user_distances))

    @property
    def service_order(self) -> list[int]:
        """Typical user first, then the others in ascending index."""
        typical = self.typical_user
        return [typical] + [k for k in range(self.user_count) if k != typical]


def _distinct_grid_draw(rng: np.random.Generator, size: int, count: int, what: str):
    if count > size:
        raise ConfigurationError(f"cannot place {count} distinct {what} on a grid of {size}")
    return rng.choice(size, size=count, replace=False)


def sample_realization(
    config: SystemConfig, rng: np.random.Generator
) -> ChannelRealization:
    """Draw angles uniformly in spatial frequency and Gaussian path gains.

    In on-grid mode BS angles land on distinct 2-D DFT bins and RIS angles on
    distinct points of the configured dictionary grids. ``ris_on_grid`` puts
    only the RIS angles on their grids and keeps the BS angles continuous.
    """
    bs_s = config.bs_shape.spacing_over_wavelength
    ris_s = config.ris_layout.shape.spacing_over_wavelength
    paths = config.bs_ris_paths
    ris_grid = config.on_grid or config.ris_on_grid

    if config.on_grid:
        bs_z, bs_x = dft_grid_frequencies(config.bs_shape)
        bins = _distinct_grid_draw(rng, config.bs_shape.size, paths, "BS paths")
        bs_aoa = np.column_stack([bs_z[bins], bs_x[bins]])
    else:
        bs_aoa = rng.uniform(-bs_s, bs_s, size=(paths, 2))
    if ris_grid:
        aod_dict = config.aod_dictionary()
        cols = _distinct_grid_draw(rng, aod_dict.size, paths, "RIS departures")
        ris_aod = np.column_stack([aod_dict.vertical_freqs[cols], aod_dict.horizontal_freqs[cols]])
    else:
        ris_aod = rng.uniform(-ris_s, ris_s, size=(paths, 2))

    alpha = complex_normal(rng, paths, 1e-3 * config.bs_ris_distance**-2.2)

    # users sit uniformly inside a sphere around the cluster centre
    centre = np.array([config.ris_user_distance, 0.0, 0.0])
    directions = rng.standard_normal((config.user_count, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    radii = config.user_cluster_radius * rng.uniform(size=config.user_count) ** (1 / 3)
    distances = np.linalg.norm(centre + directions * radii[:, None], axis=1)

    user_dict = config.user_dictionary() if ris_grid else None
    user_aoa, user_gains = [], []
    for k, count in enumerate(config.user_ris_paths):
        if user_dict is not None:
            cols = _distinct_grid_draw(rng, user_dict.size, count, "user paths")
            user_aoa.append(
                np.column_stack([user_dict.vertical_freqs[cols], user_dict.horizontal_freqs[cols]])
            )
        else:
            user_aoa.append(rng.uniform(-ris_s, ris_s, size=(count, 2)))
        user_gains.append(complex_normal(rng, count, 1e-3 * distances[k] ** -2.8))

    return ChannelRealization.from_parameters(
        config, bs_aoa, ris_aod, alpha, user_aoa, user_gains, distances
    )


def cascaded_direct(
    real: ChannelRealization, scattering: ScatteringMatrix, user: int
) -> np.ndarray:
    """``Σ_g H_g Φ̄_g h_{k,g}`` evaluated block by block."""
    layout = real.config.ris_layout
    if scattering.layout.group_size != layout.group_size or (
        scattering.layout.group_count != layout.group_count
    ):
        raise DimensionError("scattering matrix does not match the RIS grouping")
    m_bar = layout.group_size
    h_bs = real.bs_ris_channel
    h_user = real.user_channel(user)
    received = np.zeros(h_bs.shape[0], dtype=complex)
    for g, block in enumerate(scattering.blocks):
        sl = slice(g * m_bar, (g + 1) * m_bar)
        received += h_bs[:, sl] @ (block @ h_user[sl])
    return received


def blockwise_cascaded_matrix(real: ChannelRealization, user: int) -> np.ndarray:
    """``B̄_k = [h_{k,1}^T ⊗ H_1, ..., h_{k,G}^T ⊗ H_G]``."""
    layout = real.config.ris_layout
    m_bar = layout.group_size
    h_bs = real.bs_ris_channel
    h_user = real.user_channel(user)
    return np.hstack(
        [
            np.kron(
                h_user[g * m_bar : (g + 1) * m_bar][None, :],
                h_bs[:, g * m_bar : (g + 1) * m_bar],
            )
            for g in range(layout.group_count)
        ]
    )


def _steering_product(real: ChannelRealization, user: int) -> np.ndarray:
    """``(β_k^T ⊗ Λ) B_k``, the ``L x M̄²G`` middle factor of ``G_k``."""
    layout = real.config.ris_layout
    m_bar = layout.group_size
    a_m, a_k = real.ris_steering, real.user_steering[user]
    b_k = np.hstack(
        [
            np.kron(a_k[g * m_bar : (g + 1) * m_bar].T, a_m[g * m_bar : (g + 1) * m_bar].conj().T)
            for g in range(layout.group_count)
        ]
    )
    return np.kron(real.user_gains[user][None, :], real.lambda_matrix) @ b_k


def cascaded_matrix(real: ChannelRealization, user: int) -> np.ndarray:
    """``G_k = A_N (β_k^T ⊗ Λ) B_k``."""
    return real.bs_steering @ _steering_product(real, user)


def cascaded_columns(real: ChannelRealization, user: int) -> np.ndarray:
    """Columns ``q_{l,k}`` with ``G_k = A_N [q_{1,k}, ..., q_{L,k}]^H``."""
    return _steering_product(real, user).conj().T


def synthesize_measurements(
    real: ChannelRealization,
    schedule: TrainingSchedule,
    user: int,
    rng: np.random.Generator,
    noise_variance: float | None = None,
) -> np.ndarray:
    """``Y_k = √p G_k Θ_k + N_k`` with unit pilot symbols.

    The schedule must have ``τ_k`` columns, where ``τ_k`` is the pilot length
    of the user's position in the service order.
    """
    config = real.config
    if schedule.matrix.shape[0] != config.ris_layout.training_length:
        raise DimensionError(
            f"schedule has {schedule.matrix.shape[0]} rows, "
            f"expected {config.ris_layout.training_length}"
        )
    slots = config.pilot_lengths[real.service_order.index(user)]
    if schedule.matrix.shape[1] != slots:
        raise ConfigurationError(
            f"schedule has {schedule.matrix.shape[1]} pilot slots, user {user} is given {slots}"
        )
    if noise_variance is None:
        noise_variance = config.effective_noise_variance
    clean = np.sqrt(config.transmit_power) * cascaded_matrix(real, user) @ schedule.matrix
    return clean + complex_normal(rng, clean.shape, noise_variance)

