"""Greedy sparse recovery shared by the estimation stages and baselines."""

from dataclasses import dataclass, field
from typing import Protocol, Sequence, runtime_checkable

import numpy as np
from scipy.linalg import lstsq

from .errors import DimensionError, ZeroColumnError

# Residuals below this fraction of the measurement norm count as exact fits
RELATIVE_RESIDUAL_FLOOR = 1e-12


@dataclass
class SparseSolution:
    """Support, coefficients and residual of a sparse recovery run."""

    support: list[int]
    coefficients: np.ndarray
    residual_norm: float
    residual_history: list[float] = field(default_factory=list)

    def dense(self, size: int) -> np.ndarray:
        """Scatter the coefficients into a length-``size`` vector."""
        vector = np.zeros(size, dtype=complex)
        vector[self.support] = self.coefficients
        return vector


@runtime_checkable
class AtomOperator(Protocol):
    """A dictionary that can be correlated against without materializing it."""

    shape: tuple[int, int]

    def correlate(self, residual: np.ndarray) -> np.ndarray:
        """Return ``A^H r``."""
        ...

    def columns(self, indices: Sequence[int]) -> np.ndarray:
        """Materialize the selected columns as an ``m x len(indices)`` matrix."""
        ...

    def column_norms(self) -> np.ndarray: ...


class MatrixAtoms:
    """``AtomOperator`` view of an explicit matrix."""

    def __init__(self, matrix: np.ndarray):
        self.matrix = np.asarray(matrix)
        if self.matrix.ndim != 2:
            raise DimensionError(f"dictionary must be 2-D, got shape {self.matrix.shape}")
        self.shape = self.matrix.shape

    def correlate(self, residual: np.ndarray) -> np.ndarray:
        return self.matrix.conj().T @ residual

    def columns(self, indices: Sequence[int]) -> np.ndarray:
        return self.matrix[:, list(indices)]

    def column_norms(self) -> np.ndarray:
        return np.linalg.norm(self.matrix, axis=0)


def as_atom_operator(dictionary) -> AtomOperator:
    if isinstance(dictionary, np.ndarray):
        return MatrixAtoms(dictionary)
    if isinstance(dictionary, AtomOperator):
        return dictionary
    return MatrixAtoms(np.asarray(dictionary))


def column_normalize(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Scale every column to unit norm and return the original norms."""
    matrix = np.asarray(matrix)
    scales = np.linalg.norm(matrix, axis=0)
    zero = np.flatnonzero(scales == 0)
    if zero.size:
        raise ZeroColumnError(int(zero[0]))
    return matrix / scales, scales


def _fit(submatrix: np.ndarray, measurement: np.ndarray) -> np.ndarray:
    # minimum-norm solution when the support columns are dependent
    return lstsq(submatrix, measurement)[0]


def ls_on_support(dictionary, measurement: np.ndarray, support: Sequence[int]) -> np.ndarray:
    """Least-squares coefficients of ``measurement`` on the given columns."""
    if len(support) == 0:
        raise ValueError("support must not be empty")
    atoms = as_atom_operator(dictionary)
    return _fit(atoms.columns(support), np.asarray(measurement, dtype=complex).ravel())


def residual_threshold_for(measurement_length: int, noise_variance: float) -> float:
    """Noise-matched stopping level ``√(m δ²)``."""
    return float(np.sqrt(measurement_length * noise_variance))


# Relative margin a competing branch must win by; ties keep the greedy path
BRANCH_MARGIN = 1e-9


def improves_on(
    candidate: SparseSolution, best: SparseSolution, stop_level: float | None
) -> bool:
    """Whether ``candidate`` beats ``best`` by more than ``BRANCH_MARGIN``.

    Under a ``stop_level`` a solution reaching it beats one that does not and
    fewer atoms win next; the residual norm decides otherwise.
    """
    if stop_level is not None:
        reached = candidate.residual_norm <= stop_level
        best_reached = best.residual_norm <= stop_level
        if reached != best_reached:
            return reached
        if len(candidate.support) != len(best.support):
            return len(candidate.support) < len(best.support)
    return candidate.residual_norm < best.residual_norm * (1 - BRANCH_MARGIN)


def omp(
    dictionary,
    measurement: np.ndarray,
    sparsity: int | None = None,
    residual_threshold: float | None = None,
    branches: int = 1,
    max_leaves: int = 64,
) -> SparseSolution:
    """Orthogonal matching pursuit with optional depth-first branching.

    Atoms are ranked by ``|a^H r| / ‖a‖`` (ties go to the lowest index) and the
    coefficients are refit by least squares on the whole support at every step.
    Iteration stops after ``sparsity`` atoms, once the residual norm reaches
    ``residual_threshold``, or when the residual is numerically zero.

    With ``branches > 1`` the ``branches`` best-ranked atoms are tried at every
    level (only at the first level when stopping on the residual alone), the
    plain greedy path first. Supports already visited are skipped and at most
    ``max_leaves`` complete paths are evaluated. Without a residual threshold
    the search ends at the first numerically exact fit. The kept path has
    the smallest residual; under a residual threshold, paths reaching it win
    and fewer atoms win among those. Ties keep the earlier path, so ``branches=1`` is plain OMP.

    Args:
        dictionary: ``m x n`` matrix or an ``AtomOperator``
        measurement: length-``m`` vector
        sparsity: number of atoms to select
        residual_threshold: residual norm at which to stop
        branches: candidate atoms tried per level
        max_leaves: complete paths evaluated at most

    Returns:
        SparseSolution with coefficients for the original (unnormalized) atoms
    """
    if sparsity is None and residual_threshold is None:
        raise ValueError("omp needs a sparsity or a residual threshold")
    if branches < 1 or max_leaves < 1:
        raise ValueError("branches and max_leaves must be positive")
    atoms = as_atom_operator(dictionary)
    m, n = atoms.shape
    y = np.asarray(measurement, dtype=complex).ravel()
    if y.shape[0] != m:
        raise DimensionError(f"measurement has length {y.shape[0]}, dictionary has {m} rows")

    norms = atoms.column_norms()
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ZeroColumnError(int(zero[0]))

    y_norm = float(np.linalg.norm(y))
    if y_norm == 0.0:
        return SparseSolution([], np.zeros(0, dtype=complex), 0.0, [0.0])

    max_atoms = n if sparsity is None else min(sparsity, n)
    if sparsity is None:
        max_atoms = min(max_atoms, m)
    exact_level = RELATIVE_RESIDUAL_FLOOR * y_norm
    stop_level = max(residual_threshold or 0.0, exact_level)
    ranking = None if residual_threshold is None else stop_level

    leaves: list[SparseSolution] = []
    visited: set[frozenset[int]] = set()

    def finished() -> bool:
        exact = ranking is None and leaves[-1].residual_norm <= exact_level
        return exact or len(leaves) >= max_leaves

    def descend(support: list[int], coefficients: np.ndarray, residual, history: list[float]):
        if len(support) >= max_atoms or history[-1] <= stop_level:
            leaves.append(SparseSolution(support, coefficients, history[-1], history))
            return
        scores = np.abs(atoms.correlate(residual)) / norms
        scores[support] = -1.0
        width = branches if sparsity is not None or not support else 1
        for j in np.argsort(-scores, kind="stable")[:width]:
            if scores[j] < 0 or (leaves and finished()):
                return
            extended = support + [int(j)]
            key = frozenset(extended)
            if key in visited:
                continue
            visited.add(key)
            submatrix = atoms.columns(extended)
            fitted = _fit(submatrix, y)
            remainder = y - submatrix @ fitted
            descend(extended, fitted, remainder, history + [float(np.linalg.norm(remainder))])

    descend([], np.zeros(0, dtype=complex), y, [y_norm])

    best = leaves[0]
    for leaf in leaves[1:]:
        if improves_on(leaf, best, ranking):
            best = leaf
    return best
