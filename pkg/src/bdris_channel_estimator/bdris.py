"""
BD-RIS Scattering Structures
============================

Group-connected scattering matrices, Bernoulli training schedules and the
row-selection matrices that factor a scattering block out of a Kronecker
product.

A scattering configuration is vectorized group by group: the slice
``g*M̄²:(g+1)*M̄²`` holds ``vec(Φ̄_g)`` in column-major order.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import block_diag, lu_factor, lu_solve

from .config import logger
from .errors import DimensionError, SingularBlockError
from .geometry import GroupLayout


def _check_blocks(layout: GroupLayout, blocks: np.ndarray) -> np.ndarray:
    blocks = np.asarray(blocks)
    expected = (layout.group_count, layout.group_size, layout.group_size)
    if blocks.shape != expected:
        raise DimensionError(f"expected blocks of shape {expected}, got {blocks.shape}")
    return blocks


def vectorize_blocks(blocks: np.ndarray) -> np.ndarray:
    """Stack ``vec(Φ̄_g)`` (column-major) over groups."""
    return np.transpose(blocks, (0, 2, 1)).reshape(-1)


def unvectorize_blocks(vector: np.ndarray, layout: GroupLayout) -> np.ndarray:
    """Inverse of ``vectorize_blocks``."""
    m_bar = layout.group_size
    return vector.reshape(layout.group_count, m_bar, m_bar).transpose(0, 2, 1)


@dataclass(frozen=True)
class ScatteringMatrix:
    """Block-diagonal scattering matrix ``blkdiag(Φ̄_1, ..., Φ̄_G)``."""

    layout: GroupLayout
    blocks: np.ndarray

    def __post_init__(self):
        _check_blocks(self.layout, self.blocks)

    @classmethod
    def from_dense(cls, matrix: np.ndarray, layout: GroupLayout) -> "ScatteringMatrix":
        """Split a dense ``M x M`` matrix into blocks, rejecting off-block entries."""
        m, m_bar = layout.element_count, layout.group_size
        matrix = np.asarray(matrix)
        if matrix.shape != (m, m):
            raise DimensionError(f"expected a {m}x{m} matrix, got {matrix.shape}")
        blocks = np.stack(
            [matrix[g * m_bar : (g + 1) * m_bar, g * m_bar : (g + 1) * m_bar]
             for g in range(layout.group_count)]
        )
        if not np.allclose(block_diag(*blocks), matrix, rtol=0.0, atol=1e-12):
            raise DimensionError("matrix has entries outside the group blocks")
        return cls(layout=layout, blocks=blocks)

    def dense(self) -> np.ndarray:
        return block_diag(*self.blocks)

    def vectorized(self) -> np.ndarray:
        """The equivalent configuration vector ``p̄``."""
        return vectorize_blocks(self.blocks)

    def unitarity_error(self) -> float:
        """Largest ``‖Φ̄_g^H Φ̄_g − I‖_F`` over groups."""
        eye = np.eye(self.layout.group_size)
        gram = np.conj(np.transpose(self.blocks, (0, 2, 1))) @ self.blocks
        return float(np.max(np.linalg.norm(gram - eye, axis=(1, 2))))

    def is_unitary(self, tolerance: float = 1e-10) -> bool:
        return self.unitarity_error() < tolerance


@dataclass(frozen=True)
class TrainingSchedule:
    """Per-slot scattering configurations ``Θ = [p̄_1, ..., p̄_τ]``."""

    layout: GroupLayout
    matrix: np.ndarray
    seed: int | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.layout.training_length:
            raise DimensionError(
                f"schedule must have {self.layout.training_length} rows, "
                f"got shape {self.matrix.shape}"
            )

    @property
    def slots(self) -> int:
        return self.matrix.shape[1]

    def blocks(self) -> np.ndarray:
        """Per-slot group blocks ``Φ̄_{t,g}``, shape ``(τ, G, M̄, M̄)``."""
        m_bar = self.layout.group_size
        return self.matrix.T.reshape(
            self.slots, self.layout.group_count, m_bar, m_bar
        ).transpose(0, 1, 3, 2)

    def slot(self, t: int) -> ScatteringMatrix:
        return ScatteringMatrix(self.layout, unvectorize_blocks(self.matrix[:, t], self.layout))

    def save(self, path: str | Path) -> Path:
        """Write the schedule and its seed to an ``.npz`` archive."""
        path = Path(path)
        np.savez(
            path,
            matrix=self.matrix,
            seed=-1 if self.seed is None else self.seed,
            horizontal_count=self.layout.shape.horizontal_count,
            vertical_count=self.layout.shape.vertical_count,
            spacing_over_wavelength=self.layout.shape.spacing_over_wavelength,
            group_count=self.layout.group_count,
        )
        return path if path.suffix == ".npz" else path.with_suffix(path.suffix + ".npz")

    @classmethod
    def load(cls, path: str | Path) -> "TrainingSchedule":
        with np.load(path) as archive:
            layout = GroupLayout(
                shape={
                    "horizontal_count": int(archive["horizontal_count"]),
                    "vertical_count": int(archive["vertical_count"]),
                    "spacing_over_wavelength": float(archive["spacing_over_wavelength"]),
                },
                group_count=int(archive["group_count"]),
            )
            seed = int(archive["seed"])
            return cls(layout=layout, matrix=archive["matrix"], seed=None if seed < 0 else seed)


def random_unitary_block_matrix(
    layout: GroupLayout, rng: np.random.Generator
) -> ScatteringMatrix:
    """Draw every block Haar-uniformly from the unitary group."""
    m_bar = layout.group_size
    shape = (layout.group_count, m_bar, m_bar)
    gaussian = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)
    q, r = np.linalg.qr(gaussian)
    diagonal = np.diagonal(r, axis1=1, axis2=2)
    q = q * (diagonal / np.abs(diagonal))[:, None, :]
    return ScatteringMatrix(layout=layout, blocks=q)


def bernoulli_training_schedule(
    layout: GroupLayout,
    slots: int,
    rng: np.random.Generator,
    seed: int | None = None,
) -> TrainingSchedule:
    """I.i.d. uniform ±1 training configurations for ``slots`` time slots."""
    if slots < 1:
        raise ValueError(f"slots must be >= 1, got {slots}")
    matrix = rng.choice(np.array([-1.0, 1.0]), size=(layout.training_length, slots))
    return TrainingSchedule(layout=layout, matrix=matrix, seed=seed)


def admittance_to_scattering(
    admittance: np.ndarray, layout: GroupLayout, reference_impedance: float = 50.0
) -> ScatteringMatrix:
    """Blockwise ``Φ_g = (I + Z0 Y_g)^{-1} (I − Z0 Y_g)``.

    ``admittance`` is either the dense block-diagonal ``M x M`` matrix or the
    stacked ``(G, M̄, M̄)`` blocks.
    """
    admittance = np.asarray(admittance, dtype=complex)
    if admittance.ndim == 2:
        admittance = ScatteringMatrix.from_dense(admittance, layout).blocks
    admittance = _check_blocks(layout, admittance)
    eye = np.eye(layout.group_size)
    blocks = np.empty_like(admittance)
    for g, y_g in enumerate(admittance):
        lhs = eye + reference_impedance * y_g
        if np.linalg.cond(lhs) > 1.0 / np.finfo(float).eps:
            raise SingularBlockError(g, f"I + Z0*Y is singular in group {g}")
        blocks[g] = lu_solve(lu_factor(lhs), eye - reference_impedance * y_g)
    logger.debug(f"Converted admittance of {layout.group_count} groups to scattering")
    return ScatteringMatrix(layout=layout, blocks=blocks)


def row_selection_blocks(scattering: ScatteringMatrix) -> np.ndarray:
    """``P_g = blkdiag([Φ̄_g]_{1,:}, ..., [Φ̄_g]_{M̄,:})`` for every group.

    Each ``P_g`` has shape ``(M̄, M̄²)`` and satisfies
    ``P_g (a ⊗ h) = Diag(a) Φ̄_g h``.
    """
    return np.stack([block_diag(*block) for block in scattering.blocks])


def row_selection_matrix(scattering: ScatteringMatrix) -> np.ndarray:
    """``P = blkdiag(P_1, ..., P_G)`` of shape ``(M, M̄²G)``."""
    return block_diag(*row_selection_blocks(scattering))


def group_kron(left: np.ndarray, right: np.ndarray, layout: GroupLayout) -> np.ndarray:
    """Concatenate ``left_g ⊗ right_g`` over groups for two length-``M`` vectors."""
    g, m_bar = layout.group_count, layout.group_size
    left = left.reshape(g, m_bar)
    right = right.reshape(g, m_bar)
    return (left[:, :, None] * right[:, None, :]).reshape(-1)
