"""
Stage II: full cascaded CSI of the typical user
===============================================

After the common BS steering matrix is projected out, column ``l`` of the
equivalent measurement is ``Θ_1^H q_{l,1}`` plus noise. The strongest column
``r`` is recovered by OMP over the block-Kronecker dictionary ``D`` whose
atom ``c = c_1 * D_2 + c_2`` stacks ``conj(A_1[:, c_1])_g ⊗ A_2[:, c_2]_g``
over groups (``A_1`` spans user angles, ``A_2`` RIS departures). Every other
column is a phase-ramped, rescaled copy of ``q_{r,1}``:
``q_{l,1} = γ_l^* ΔD(Δω_l, Δμ_l) q_{r,1}``, found by a correlation search and
a scalar least-squares fit.
"""

from dataclasses import dataclass, field

import numpy as np

from ..bdris import TrainingSchedule
from ..channel import SystemConfig, pilot_lower_bounds
from ..config import logger
from ..errors import DegenerateCorrelationError, ZeroMeasurementError
from ..geometry import AngularDictionary, GroupLayout, SpatialFrequencyPair
from ..geometry import rearranged_upa_responses
from ..sparse import SparseSolution, omp, residual_threshold_for
from .stage1 import AoaEstimate


@dataclass
class ReferenceColumn:
    """OMP recovery of the reference column ``q_{r,1}``."""

    column: np.ndarray
    solution: SparseSolution
    atoms: list[tuple[int, int]]
    warnings: list[str] = field(default_factory=list)


@dataclass
class TypicalUserEstimate:
    """Everything Stage II learns about the typical user."""

    reference_index: int
    reference_column: np.ndarray
    delta_pairs: np.ndarray
    gain_ratios: np.ndarray
    columns: np.ndarray
    cascaded: np.ndarray
    atom_indices: list[int]
    atom_coefficients: np.ndarray
    reference_aod: SpatialFrequencyPair | None
    reference_aod_index: int | None
    warnings: list[str] = field(default_factory=list)


def project_out_bs_aoa(
    yk: np.ndarray, steering_estimate: np.ndarray, transmit_power: float
) -> np.ndarray:
    """``Ỹ_k = ((1 / (N √p)) Â_N^H Y_k)^H``, shape ``τ_k x L̂``."""
    n = steering_estimate.shape[0]
    return (steering_estimate.conj().T @ yk / (n * np.sqrt(transmit_power))).conj().T


def select_reference_column(equivalent: np.ndarray) -> int:
    """Index of the column with the largest norm (lowest index on ties)."""
    norms = np.linalg.norm(equivalent, axis=0)
    if not np.any(norms):
        raise ZeroMeasurementError("equivalent measurement is identically zero")
    return int(np.argmax(norms))


def _schedule_blocks(schedule: np.ndarray, layout: GroupLayout) -> np.ndarray:
    """``T[t, g, u, v] = Θ[g M̄² + u M̄ + v, t]``."""
    m_bar = layout.group_size
    return schedule.T.reshape(schedule.shape[1], layout.group_count, m_bar, m_bar)


def equivalent_dictionary(
    schedule: np.ndarray, user_dict: AngularDictionary, aod_dict: AngularDictionary
) -> np.ndarray:
    """``Θ^H D`` computed group by group without building ``D``."""
    layout = user_dict.layout
    blocks = _schedule_blocks(schedule, layout)
    product = np.einsum(
        "tguv,guc,gvd->tcd",
        blocks.conj(),
        user_dict.group_blocks().conj(),
        aod_dict.group_blocks(),
        optimize=True,
    )
    return product.reshape(schedule.shape[1], user_dict.size * aod_dict.size)


def dictionary_atoms(
    indices, user_dict: AngularDictionary, aod_dict: AngularDictionary
) -> np.ndarray:
    """Materialize columns of ``D`` (length ``M̄²G`` each)."""
    indices = np.asarray(indices, dtype=int)
    c1, c2 = np.divmod(indices, aod_dict.size)
    left = user_dict.group_blocks()[:, :, c1].conj()
    right = aod_dict.group_blocks()[:, :, c2]
    atoms = left[:, :, None, :] * right[:, None, :, :]
    return atoms.reshape(-1, indices.size)


def dictionary_synthesis(
    coefficients: np.ndarray, user_dict: AngularDictionary, aod_dict: AngularDictionary
) -> np.ndarray:
    """``D X`` for dense coefficients ``X`` (``D_1 D_2 x L``), group by group."""
    x = np.asarray(coefficients).reshape(user_dict.size, aod_dict.size, -1)
    q = np.einsum(
        "guc,cdl,gvd->guvl",
        user_dict.group_blocks().conj(),
        x,
        aod_dict.group_blocks(),
        optimize=True,
    )
    return q.reshape(-1, x.shape[2])


def estimate_reference_column(
    reference_measurement: np.ndarray,
    schedule: np.ndarray,
    user_dict: AngularDictionary,
    aod_dict: AngularDictionary,
    sparsity: int | None,
    residual_threshold: float | None = None,
    dictionary: np.ndarray | None = None,
    branches: int = 1,
    max_leaves: int = 64,
) -> ReferenceColumn:
    """Recover ``q_{r,1}`` by OMP on ``Θ_1^H D``.

    ``dictionary`` may carry a precomputed ``equivalent_dictionary``.
    ``branches`` and ``max_leaves`` widen the pursuit as in ``omp``.
    """
    layout = user_dict.layout
    slots = schedule.shape[1]
    warnings = []
    if sparsity is not None and slots <= sparsity:
        warnings.append(
            f"{slots} pilot slots cannot stably fit {sparsity} atoms by least squares"
        )
    if not np.any(reference_measurement):
        return ReferenceColumn(
            column=np.zeros(layout.training_length, dtype=complex),
            solution=SparseSolution([], np.zeros(0, dtype=complex), 0.0, [0.0]),
            atoms=[],
            warnings=warnings,
        )
    if dictionary is None:
        dictionary = equivalent_dictionary(schedule, user_dict, aod_dict)
    solution = omp(
        dictionary, reference_measurement, sparsity, residual_threshold, branches, max_leaves
    )
    column = dictionary_atoms(solution.support, user_dict, aod_dict) @ solution.coefficients
    atoms = [divmod(c, aod_dict.size) for c in solution.support]
    for message in warnings:
        logger.warning(f"Stage II: {message}")
    return ReferenceColumn(column=column, solution=solution, atoms=atoms, warnings=warnings)


def delta_grid(count: int, spacing: float) -> np.ndarray:
    """Half-open grid over ``[-2 d/λ, 2 d/λ)``."""
    return -2 * spacing + 4 * spacing * np.arange(count) / count


def delta_diagonal(layout: GroupLayout, deltas_v, deltas_h) -> np.ndarray:
    """Diagonals of ``ΔD = blkdiag_g(I_M̄ ⊗ Diag(a_M(Δω, Δμ)_g))``.

    Returns one row per delta pair, each of length ``M̄²G``.
    """
    responses = rearranged_upa_responses(layout, deltas_v, deltas_h)
    g, m_bar = layout.group_count, layout.group_size
    per_group = responses.T.reshape(-1, g, 1, m_bar)
    return np.broadcast_to(per_group, (per_group.shape[0], g, m_bar, m_bar)).reshape(
        per_group.shape[0], -1
    )


def estimate_other_column(
    measurement: np.ndarray,
    schedule: np.ndarray,
    reference_column: np.ndarray,
    layout: GroupLayout,
    grid: tuple[int, int],
) -> tuple[float, float, complex, np.ndarray]:
    """Correlation search for ``(Δω, Δμ)`` followed by the scalar LS fit.

    Candidates are ranked by ``|c^H ỹ| / ‖c‖`` with ``c = Θ^H ΔD q̂_r``.

    Returns:
        ``(Δω, Δμ, γ, q̂_l)`` where ``q̂_l = γ^* ΔD q̂_r``
    """
    s = layout.shape.spacing_over_wavelength
    d1, d2 = grid
    dv, dh = np.divmod(np.arange(d1 * d2), d2)
    deltas_v = delta_grid(d1, s)[dv]
    deltas_h = delta_grid(d2, s)[dh]

    diagonals = delta_diagonal(layout, deltas_v, deltas_h)
    candidates = (diagonals * reference_column) @ schedule.conj()
    norms = np.linalg.norm(candidates, axis=1)
    if not np.any(norms):
        raise DegenerateCorrelationError("every correlation candidate vanished")
    with np.errstate(divide="ignore", invalid="ignore"):
        scores = np.where(norms > 0, np.abs(candidates.conj() @ measurement) / norms, -1.0)
    best = int(np.argmax(scores))

    c = candidates[best]
    gain_conj = np.vdot(c, measurement) / np.vdot(c, c)
    column = gain_conj * diagonals[best] * reference_column
    return float(deltas_v[best]), float(deltas_h[best]), complex(np.conj(gain_conj)), column


def estimate_typical_user(
    y1: np.ndarray,
    aoa: AoaEstimate,
    schedule: TrainingSchedule,
    config: SystemConfig,
    sparsity: int | None = None,
    noise_variance: float | None = None,
) -> TypicalUserEstimate:
    """Recover every column ``q̂_{l,1}`` and assemble ``Ĝ_1 = Â_N Q̂^H``."""
    user_dict, aod_dict = config.user_dictionary(), config.aod_dictionary()
    layout = config.ris_layout
    theta = schedule.matrix
    a_hat = aoa.steering_estimate
    equivalent = project_out_bs_aoa(y1, a_hat, config.transmit_power)
    r = select_reference_column(equivalent)

    threshold = None
    if config.options.stopping == "residual":
        sparsity = None
        threshold = config.options.residual_threshold
        if threshold is None:
            variance = config.effective_noise_variance if noise_variance is None else noise_variance
            threshold = residual_threshold_for(
                theta.shape[1], variance / (a_hat.shape[0] * config.transmit_power)
            )

    dictionary = equivalent_dictionary(theta, user_dict, aod_dict)
    widths = (config.options.omp_branches, config.options.omp_max_leaves)
    reference = estimate_reference_column(
        equivalent[:, r], theta, user_dict, aod_dict, sparsity, threshold, dictionary, *widths
    )
    warnings = list(reference.warnings)
    bound, _ = pilot_lower_bounds(config)
    if theta.shape[1] < bound:
        warnings.append(f"typical-user pilot length {theta.shape[1]} is below {bound}")
        logger.warning(f"Stage II: {warnings[-1]}")

    count = aoa.path_count
    columns = np.zeros((layout.training_length, count), dtype=complex)
    deltas = np.zeros((count, 2))
    gains = np.ones(count, dtype=complex)
    columns[:, r] = reference.column
    for l in range(count):
        if l == r:
            continue
        if not np.any(reference.column):
            continue
        d_omega, d_mu, gamma, column = estimate_other_column(
            equivalent[:, l], theta, reference.column, layout, config.delta_grid_size
        )
        deltas[l] = (d_omega, d_mu)
        gains[l] = gamma
        if config.options.propagation == "per_column":
            column = estimate_reference_column(
                equivalent[:, l],
                theta,
                user_dict,
                aod_dict,
                sparsity,
                threshold,
                dictionary,
                *widths,
            ).column
        columns[:, l] = column

    aod_pair, aod_index = None, None
    solution = reference.solution
    if solution.support:
        strongest = int(np.argmax(np.abs(solution.coefficients)))
        aod_index = reference.atoms[strongest][1]
        aod_pair = SpatialFrequencyPair(
            float(aod_dict.vertical_freqs[aod_index]),
            float(aod_dict.horizontal_freqs[aod_index]),
        )

    logger.debug(
        f"Stage II: reference column {r}, atoms {solution.support}, deltas {deltas.tolist()}"
    )
    return TypicalUserEstimate(
        reference_index=r,
        reference_column=reference.column,
        delta_pairs=deltas,
        gain_ratios=gains,
        columns=columns,
        cascaded=a_hat @ columns.conj().T,
        atom_indices=list(solution.support),
        atom_coefficients=solution.coefficients,
        reference_aod=aod_pair,
        reference_aod_index=aod_index,
        warnings=warnings,
    )
