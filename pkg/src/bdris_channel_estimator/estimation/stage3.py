"""
Stage III: the remaining users
==============================

The typical user's estimate fixes everything the users share: the BS paths,
their gains up to one common scale, the RIS departure offsets ``Δ_l`` and the
reference departure ``(ω_r, μ_r)``. With the common part

    H_s = Â_N Λ_s A_ΔM^H,    H_c = (1/N) Â_N^H H_s,

the projected measurement of user ``k`` in slot ``t`` is
``H_c Diag(ā) Φ_t h̄_k`` where ``ā = a_M(-ω_r, -μ_r)`` and ``h̄_k = h_k / β̄``.
``ā`` is one column of the departure dictionary and ``h̄_k`` is sparse in the
user-angle dictionary, so the unknowns form a single active block of a
block-sparse problem (HBOMP): pick the block, then run OMP inside it.
Neighbouring departure blocks can correlate almost as well as the true one,
so a short list of the best-ranked blocks is fitted and the smallest
residual decides.
"""

from dataclasses import dataclass, field

import numpy as np

from ..bdris import TrainingSchedule
from ..channel import SystemConfig
from ..config import logger
from ..errors import (
    DegenerateCorrelationError,
    DimensionError,
    EstimationError,
    ZeroMeasurementError,
)
from ..geometry import AngularDictionary, GroupLayout, SpatialFrequencyPair
from ..geometry import rearranged_upa_responses
from ..sparse import (
    RELATIVE_RESIDUAL_FLOOR,
    SparseSolution,
    improves_on,
    omp,
    residual_threshold_for,
)
from .stage1 import AoaEstimate
from .stage2 import TypicalUserEstimate, delta_diagonal, project_out_bs_aoa


@dataclass
class CommonPart:
    """Quantities shared by every user once the typical user is known."""

    gains: np.ndarray
    delta_steering: np.ndarray
    reference_aod: SpatialFrequencyPair
    steering_estimate: np.ndarray
    delta_pairs: np.ndarray
    scaled_channel: np.ndarray = field(init=False)
    equivalent_common: np.ndarray = field(init=False)

    def __post_init__(self):
        self.scaled_channel = (self.steering_estimate * self.gains) @ self.delta_steering.conj().T
        n = self.steering_estimate.shape[0]
        self.equivalent_common = self.steering_estimate.conj().T @ self.scaled_channel / n

    @property
    def path_count(self) -> int:
        return self.gains.shape[0]

    def bs_ris_channel(self, reference_response: np.ndarray, scale: complex = 1.0) -> np.ndarray:
        """``(1/β̄) H_s Diag(conj(a_M(ω_r, μ_r)))``.

        ``reference_response`` is the rearranged RIS response at the reference
        departure; with the true ``β̄`` as ``scale`` this is the BS-RIS channel.
        """
        return self.scaled_channel * reference_response.conj() / scale


@dataclass
class OtherUserEstimate:
    """HBOMP output and reconstruction for one non-typical user."""

    user: int
    block_index: int
    block_pair: SpatialFrequencyPair
    solution: SparseSolution
    user_channel: np.ndarray
    columns: np.ndarray
    cascaded: np.ndarray
    warnings: list[str] = field(default_factory=list)


def build_common_part(
    typical: TypicalUserEstimate,
    aoa: AoaEstimate,
    config: SystemConfig,
) -> CommonPart:
    """Assemble ``Λ_s``, ``A_ΔM``, ``H_s`` and ``H_c`` from the typical user.

    ``Λ_s(l, l) = conj(c_1) γ̂_l`` with ``c_1`` the first OMP coefficient of
    the reference column, which fixes ``β̄`` to that atom's user gain.
    """
    if typical.reference_aod is None or typical.atom_coefficients.size == 0:
        raise EstimationError("typical-user estimate carries no reference departure")
    gain_scale = np.conj(typical.atom_coefficients[0])
    deltas = np.asarray(typical.delta_pairs, dtype=float)
    delta_steering = rearranged_upa_responses(config.ris_layout, deltas[:, 0], deltas[:, 1])
    return CommonPart(
        gains=gain_scale * np.asarray(typical.gain_ratios),
        delta_steering=delta_steering,
        reference_aod=typical.reference_aod,
        steering_estimate=aoa.steering_estimate,
        delta_pairs=deltas,
    )


class HbompDictionary:
    """Block dictionary ``Ψ = [Ψ^(0), ..., Ψ^(P_1 - 1)]`` built on demand.

    Block ``j`` has shape ``τ L̂ x P_2`` with row ``t L̂ + l`` and column ``p``
    equal to ``Σ_m H_c[l, m] Ã_1[m, j] (Φ_t Ã_2)[m, p]``. Correlations and
    column norms of every block are computed without materializing ``Ψ``.
    """

    def __init__(
        self,
        common: CommonPart,
        schedule: TrainingSchedule,
        block_dict: AngularDictionary,
        atom_dict: AngularDictionary,
    ):
        layout = schedule.layout
        if block_dict.atoms.shape[0] != layout.element_count:
            raise DimensionError("block dictionary does not match the RIS size")
        if common.equivalent_common.shape[1] != layout.element_count:
            raise DimensionError("common part does not match the RIS size")
        self.block_dict = block_dict
        self.atom_dict = atom_dict
        # W[t, m, p] = (Φ_t Ã_2)[m, p], group by group
        phi = schedule.blocks()
        w = np.einsum("tguv,gvp->tgup", phi, atom_dict.group_blocks(), optimize=True)
        self.slot_atoms = w.reshape(schedule.slots, layout.element_count, atom_dict.size)
        self.common = common.equivalent_common
        self.slots = schedule.slots
        self.rows = self.slots * self.common.shape[0]

    @property
    def block_count(self) -> int:
        return self.block_dict.size

    @property
    def block_size(self) -> int:
        return self.atom_dict.size

    def block(self, j: int) -> np.ndarray:
        """Materialize ``Ψ^(j)``."""
        scaled = self.slot_atoms * self.block_dict.atoms[:, j][None, :, None]
        return np.einsum("lm,tmp->tlp", self.common, scaled, optimize=True).reshape(
            self.rows, self.block_size
        )

    def _back_projection(self, measurement: np.ndarray) -> np.ndarray:
        # Z[m, p] = Σ_{t,l} conj(H_c[l, m] W[t, m, p]) y[t, l]
        y = measurement.reshape(self.slots, self.common.shape[0])
        weights = y @ self.common.conj()
        return np.einsum("tm,tmp->mp", weights, self.slot_atoms.conj(), optimize=True)

    def block_correlations(self, measurement: np.ndarray) -> np.ndarray:
        """``|Ψ^(j)H y|`` for every block, shape ``P_1 x P_2``."""
        return np.abs(self.block_dict.atoms.conj().T @ self._back_projection(measurement))

    def block_column_norms(self) -> np.ndarray:
        """Column norms of every block, shape ``P_1 x P_2``."""
        gram = self.common.conj().T @ self.common
        # Σ_t conj(W[t, m, p]) W[t, n, p], weighted by (H_c^H H_c)[m, n]
        slot_gram = np.einsum(
            "tmp,tnp->pmn", self.slot_atoms.conj(), self.slot_atoms, optimize=True
        )
        slot_gram *= gram[None, :, :]
        atoms = self.block_dict.atoms
        squared = np.einsum("mj,pmn,nj->jp", atoms.conj(), slot_gram, atoms, optimize=True)
        return np.sqrt(np.maximum(squared.real, 0.0))


def build_hbomp_dictionary(
    common: CommonPart, schedule: TrainingSchedule, config: SystemConfig
) -> HbompDictionary:
    """HBOMP dictionary with departure blocks and user-angle atoms."""
    return HbompDictionary(common, schedule, config.aod_dictionary(), config.user_dictionary())


def rank_blocks(measurement: np.ndarray, dictionary: HbompDictionary) -> np.ndarray:
    """Blocks ordered by ``max_p |Ψ̃^(j)H y|`` over unit-norm columns.

    Ties keep the lower block index first.
    """
    y = np.asarray(measurement, dtype=complex).ravel()
    if y.shape[0] != dictionary.rows:
        raise DimensionError(f"measurement has length {y.shape[0]}, expected {dictionary.rows}")
    if not np.any(y):
        raise ZeroMeasurementError("stacked measurement is identically zero")

    norms = dictionary.block_column_norms()
    with np.errstate(divide="ignore", invalid="ignore"):
        normalized = np.where(norms > 0, dictionary.block_correlations(y) / norms, 0.0)
    peaks = normalized.max(axis=1)
    if not np.any(peaks > 0):
        raise DegenerateCorrelationError("no block correlates with the measurement")
    return np.argsort(-peaks, kind="stable")


def hbomp(
    measurement: np.ndarray,
    dictionary: HbompDictionary,
    sparsity: int | None,
    residual_threshold: float | None = None,
    candidates: int = 1,
    branches: int = 1,
    max_leaves: int = 64,
) -> tuple[int, SparseSolution]:
    """Identify the active block, then run OMP inside it.

    The ``candidates`` best-ranked blocks of ``rank_blocks`` are each fitted
    by OMP (widened by ``branches`` and ``max_leaves``) and the block whose
    fit ``improves_on`` the others is kept; ties keep the better-ranked
    block. Without a residual threshold the search stops at the first
    numerically exact fit. ``candidates=1`` trusts the correlation ranking.
    """
    y = np.asarray(measurement, dtype=complex).ravel()
    order = rank_blocks(y, dictionary)
    exact_level = RELATIVE_RESIDUAL_FLOOR * float(np.linalg.norm(y))

    best, solution = -1, None
    for j in order[:candidates]:
        block = dictionary.block(int(j))
        fitted = omp(block, y, sparsity, residual_threshold, branches, max_leaves)
        if solution is None or improves_on(fitted, solution, residual_threshold):
            best, solution = int(j), fitted
        if residual_threshold is None and solution.residual_norm <= exact_level:
            break
    return best, solution


def kronecker_swap(vector: np.ndarray, m: int, n: int) -> np.ndarray:
    """Map ``x ⊗ y`` (``x`` of length ``m``, ``y`` of length ``n``) to ``y ⊗ x``."""
    return np.asarray(vector).reshape(m, n).T.reshape(-1)


def reconstruct_cascaded(
    block_index: int,
    solution: SparseSolution,
    common: CommonPart,
    block_dict: AngularDictionary,
    atom_dict: AngularDictionary,
    layout: GroupLayout,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rebuild the cascaded columns of a user from its HBOMP solution.

    Per group the recovered ``ā_g ⊗ h̄_g`` is conjugated and Kronecker-swapped
    into ``conj(h̄_g) ⊗ conj(ā_g)``, ramped by ``ΔD_l`` and scaled by
    ``conj(Λ_s(l, l))``.

    Returns:
        ``(h̄_k, Q̂_k, Ĝ_k)``
    """
    g, m_bar = layout.group_count, layout.group_size
    user_channel = atom_dict.atoms[:, solution.support] @ solution.coefficients
    block = block_dict.atoms[:, block_index]
    target = np.concatenate(
        [
            np.kron(block[i * m_bar : (i + 1) * m_bar], user_channel[i * m_bar : (i + 1) * m_bar])
            for i in range(g)
        ]
    )
    swapped = np.concatenate(
        [
            kronecker_swap(target[i * m_bar**2 : (i + 1) * m_bar**2], m_bar, m_bar)
            for i in range(g)
        ]
    ).conj()

    diagonals = delta_diagonal(layout, common.delta_pairs[:, 0], common.delta_pairs[:, 1])
    columns = (diagonals * swapped * common.gains.conj()[:, None]).T
    cascaded = common.steering_estimate @ columns.conj().T
    return user_channel, columns, cascaded


def estimate_other_user(
    yk: np.ndarray,
    user: int,
    common: CommonPart,
    schedule: TrainingSchedule,
    config: SystemConfig,
    sparsity: int | None = None,
    noise_variance: float | None = None,
    dictionary: HbompDictionary | None = None,
) -> OtherUserEstimate:
    """Stage III for one user: stack, HBOMP, reconstruct."""
    a_hat = common.steering_estimate
    n = a_hat.shape[0]
    # stacked slots: entry t L̂ + l
    stacked = project_out_bs_aoa(yk, a_hat, config.transmit_power).conj().reshape(-1)
    if dictionary is None:
        dictionary = build_hbomp_dictionary(common, schedule, config)

    warnings = []
    threshold = None
    if config.options.stopping == "residual":
        sparsity = None
        threshold = config.options.residual_threshold
        if threshold is None:
            variance = config.effective_noise_variance if noise_variance is None else noise_variance
            threshold = residual_threshold_for(stacked.size, variance / (n * config.transmit_power))
    elif sparsity is not None and stacked.size <= sparsity:
        warnings.append(f"user {user}: {stacked.size} measurements for {sparsity} atoms")
        logger.warning(f"Stage III: {warnings[-1]}")

    options = config.options
    block_index, solution = hbomp(
        stacked,
        dictionary,
        sparsity,
        threshold,
        options.hbomp_candidates,
        options.omp_branches,
        options.omp_max_leaves,
    )
    user_channel, columns, cascaded = reconstruct_cascaded(
        block_index,
        solution,
        common,
        dictionary.block_dict,
        dictionary.atom_dict,
        config.ris_layout,
    )
    block_dict = dictionary.block_dict
    logger.debug(f"Stage III: user {user} block {block_index}, atoms {solution.support}")
    return OtherUserEstimate(
        user=user,
        block_index=block_index,
        block_pair=SpatialFrequencyPair(
            float(block_dict.vertical_freqs[block_index]),
            float(block_dict.horizontal_freqs[block_index]),
        ),
        solution=solution,
        user_channel=user_channel,
        columns=columns,
        cascaded=cascaded,
        warnings=warnings,
    )
