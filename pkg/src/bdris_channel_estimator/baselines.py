"""
Baseline Estimators
===================

Two reference estimators the three-stage protocol is compared against:

- Direct-OMP runs OMP on the fully vectorized sensing model
  ``vec(Y_k) = √p (Θ_k^T ⊗ I_N) vec(G_k) + n`` with atoms
  ``conj((Θ_k^H D)_c) ⊗ a_N(b)`` over the BS DFT grid and the Stage II
  dictionary. The dictionary is never materialized.
- SBL applies EM-based sparse Bayesian learning to every column of the
  Stage II equivalent measurement, learning the noise variance as well.
"""

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .bdris import TrainingSchedule
from .channel import SystemConfig
from .config import logger
from .errors import DimensionError, MemoryBudgetError
from .estimation.stage1 import AoaEstimate
from .estimation.stage2 import (
    dictionary_atoms,
    dictionary_synthesis,
    equivalent_dictionary,
    project_out_bs_aoa,
)
from .geometry import dft_grid_frequencies, upa_responses
from .sparse import SparseSolution, omp

# Noise variance never drops below this fraction of the per-entry signal power
SBL_NOISE_FLOOR = 1e-10


@dataclass
class BaselineResult:
    """Per-user estimates of one baseline run."""

    estimator: str
    estimates: dict[int, np.ndarray]
    iterations: dict[int, int] = field(default_factory=dict)
    seconds: float = 0.0
    converged: dict[int, bool] = field(default_factory=dict)


class DirectOmpAtoms:
    """Implicit dictionary of the vectorized cascaded model.

    Atom ``i = c * B + b`` is ``conj(E[:, c]) ⊗ a_N(b)`` with ``E = Θ^H D``.
    """

    def __init__(self, equivalent: np.ndarray, bs_steering: np.ndarray):
        self.equivalent = equivalent
        self.bs_steering = bs_steering
        slots, self.codes = equivalent.shape
        self.antennas, self.beams = bs_steering.shape
        self.shape = (slots * self.antennas, self.codes * self.beams)

    def correlate(self, residual: np.ndarray) -> np.ndarray:
        r = residual.reshape(self.antennas, -1, order="F")
        return (self.bs_steering.conj().T @ r @ self.equivalent).T.reshape(-1)

    def columns(self, indices: Sequence[int]) -> np.ndarray:
        c, b = np.divmod(np.asarray(indices, dtype=int), self.beams)
        left = self.equivalent[:, c].conj()
        right = self.bs_steering[:, b]
        return (left[:, None, :] * right[None, :, :]).reshape(self.shape[0], -1)

    def column_norms(self) -> np.ndarray:
        left = np.linalg.norm(self.equivalent, axis=0)
        right = np.linalg.norm(self.bs_steering, axis=0)
        return np.outer(left, right).reshape(-1)


def direct_omp(
    yk: np.ndarray,
    schedule: TrainingSchedule,
    config: SystemConfig,
    sparsity: int,
    element_budget: float | None = None,
) -> tuple[np.ndarray, SparseSolution]:
    """OMP over the vectorized model, returning ``(Ĝ_k, solution)``.

    Raises:
        MemoryBudgetError: when ``τ N C B`` exceeds the element budget
    """
    user_dict, aod_dict = config.user_dictionary(), config.aod_dictionary()
    n = config.bs_shape.size
    slots = schedule.slots
    if yk.shape != (n, slots):
        raise DimensionError(f"expected a {n}x{slots} measurement, got {yk.shape}")
    codes = user_dict.size * aod_dict.size
    budget = config.options.element_budget if element_budget is None else element_budget
    elements = float(slots) * n * codes * n
    if elements > budget:
        raise MemoryBudgetError(
            f"Direct-OMP dictionary would span {elements:.3g} elements "
            f"(budget {budget:.3g}); use a smaller configuration such as SystemConfig.desk()"
        )

    z, x = dft_grid_frequencies(config.bs_shape)
    bs_steering = upa_responses(config.bs_shape, z, x)
    atoms = DirectOmpAtoms(
        equivalent_dictionary(schedule.matrix, user_dict, aod_dict), bs_steering
    )
    y = yk.reshape(-1, order="F") / np.sqrt(config.transmit_power)
    solution = omp(atoms, y, sparsity)

    estimate = np.zeros((n, config.ris_layout.training_length), dtype=complex)
    if solution.support:
        c, b = np.divmod(np.asarray(solution.support), atoms.beams)
        codewords = dictionary_atoms(c, user_dict, aod_dict)
        estimate = (bs_steering[:, b] * solution.coefficients) @ codewords.conj().T
    return estimate, solution


@dataclass
class SblSolution:
    """Posterior mean and EM diagnostics of one SBL run."""

    mean: np.ndarray
    hyperparameters: np.ndarray
    noise_variance: float
    iterations: int
    converged: bool
    evidence_history: list[float] = field(default_factory=list)
    best_iteration: int = 0


def _log_evidence(y: np.ndarray, factor, m: int) -> float:
    # log CN(y; 0, Σ_y) with Σ_y = L L^H
    log_det = 2.0 * np.sum(np.log(np.abs(np.diag(factor[0]))))
    quad = np.real(np.vdot(y, cho_solve(factor, y)))
    return float(-m * np.log(np.pi) - log_det - quad)


def sbl_recover(
    y: np.ndarray,
    dictionary: np.ndarray,
    max_iterations: int = 50,
    tolerance: float = 1e-6,
) -> SblSolution:
    """EM sparse Bayesian learning for ``y = Φ x + n``.

    Each atom has its own prior variance ``γ_i``; the noise variance is
    estimated jointly. Iteration stops when the largest relative change of
    ``γ`` drops below ``tolerance`` or after ``max_iterations``. A run that
    does not converge returns the iterate with the highest evidence.
    """
    phi = np.asarray(dictionary)
    y = np.asarray(y, dtype=complex).ravel()
    m, n = phi.shape
    if y.shape[0] != m:
        raise DimensionError(f"measurement has length {y.shape[0]}, dictionary has {m} rows")
    energy = float(np.real(np.vdot(y, y)))
    if energy == 0.0:
        return SblSolution(np.zeros(n, dtype=complex), np.zeros(n), 0.0, 0, True, [], 0)

    gamma = np.full(n, energy / float(np.sum(np.abs(phi) ** 2)))
    noise = 0.1 * energy / m
    floor = SBL_NOISE_FLOOR * energy / m
    eye = np.eye(m)
    history = []
    converged = False
    mean = np.zeros(n, dtype=complex)
    best = None

    iteration = 0
    for iteration in range(1, max_iterations + 1):
        factor = cho_factor(noise * eye + (phi * gamma) @ phi.conj().T, lower=True)
        history.append(_log_evidence(y, factor, m))
        mean = gamma * (phi.conj().T @ cho_solve(factor, y))
        if best is None or history[-1] > best[0]:
            best = (history[-1], iteration, mean, gamma, noise)
        quad = np.real(np.sum(phi.conj() * cho_solve(factor, phi), axis=0))
        sigma_diag = np.maximum(gamma - gamma**2 * quad, 0.0)

        new_gamma = np.abs(mean) ** 2 + sigma_diag
        residual = y - phi @ mean
        with np.errstate(divide="ignore", invalid="ignore"):
            shrink = np.where(gamma > 0, 1.0 - sigma_diag / gamma, 0.0)
        noise = max(
            (float(np.real(np.vdot(residual, residual))) + noise * float(np.sum(shrink))) / m,
            floor,
        )
        change = np.max(np.abs(new_gamma - gamma)) / max(np.max(new_gamma), np.finfo(float).tiny)
        gamma = new_gamma
        if change < tolerance:
            converged = True
            break

    best_iteration = iteration
    if not converged:
        _, best_iteration, mean, gamma, noise = best
        logger.warning(
            f"SBL did not converge within {max_iterations} iterations, "
            f"keeping iteration {best_iteration} with the highest evidence"
        )
    return SblSolution(mean, gamma, noise, iteration, converged, history, best_iteration)


def sbl_estimate(
    equivalent: np.ndarray,
    dictionary: np.ndarray,
    steering_estimate: np.ndarray,
    config: SystemConfig,
    max_iterations: int | None = None,
    tolerance: float | None = None,
) -> tuple[np.ndarray, list[SblSolution]]:
    """SBL on every column of ``Ỹ_k`` and the resulting ``Ĝ_k = Â_N (D X)^H``."""
    max_iterations = max_iterations or config.options.sbl_max_iterations
    tolerance = tolerance or config.options.sbl_tolerance
    solutions = [
        sbl_recover(equivalent[:, l], dictionary, max_iterations, tolerance)
        for l in range(equivalent.shape[1])
    ]
    coefficients = np.column_stack([s.mean for s in solutions])
    columns = dictionary_synthesis(coefficients, config.user_dictionary(), config.aod_dictionary())
    return steering_estimate @ columns.conj().T, solutions


def run_direct_omp(
    measurements: dict[int, np.ndarray],
    schedules: dict[int, TrainingSchedule],
    config: SystemConfig,
) -> BaselineResult:
    """Direct-OMP for every user with sparsity ``L² J_k``."""
    start_time = time.perf_counter()
    estimates, iterations = {}, {}
    for k, yk in sorted(measurements.items()):
        sparsity = config.bs_ris_paths**2 * config.user_ris_paths[k]
        estimates[k], solution = direct_omp(yk, schedules[k], config, sparsity)
        iterations[k] = len(solution.support)
    return BaselineResult(
        estimator="direct_omp",
        estimates=estimates,
        iterations=iterations,
        seconds=time.perf_counter() - start_time,
    )


def run_sbl(
    measurements: dict[int, np.ndarray],
    schedules: dict[int, TrainingSchedule],
    config: SystemConfig,
    aoa: AoaEstimate,
) -> BaselineResult:
    """SBL for every user, sharing the Stage I angle estimate."""
    start_time = time.perf_counter()
    user_dict, aod_dict = config.user_dictionary(), config.aod_dictionary()
    estimates, iterations, converged = {}, {}, {}
    for k, yk in sorted(measurements.items()):
        equivalent = project_out_bs_aoa(yk, aoa.steering_estimate, config.transmit_power)
        dictionary = equivalent_dictionary(schedules[k].matrix, user_dict, aod_dict)
        estimates[k], solutions = sbl_estimate(
            equivalent, dictionary, aoa.steering_estimate, config
        )
        iterations[k] = max((s.iterations for s in solutions), default=0)
        converged[k] = all(s.converged for s in solutions)
    return BaselineResult(
        estimator="sbl",
        estimates=estimates,
        iterations=iterations,
        seconds=time.perf_counter() - start_time,
        converged=converged,
    )
