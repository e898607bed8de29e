"""
Stage I: common angle-of-arrival estimation at the BS
=====================================================

Peaks of the beamspace power ``‖Ũ^H Y_1‖²`` give coarse AoA pairs; a phase
ramp search around each peak then compensates the power leakage of off-grid
paths. The rotation objective is the beam power of the whole array steered
at the rotated frequency. The default search runs two 1-D sweeps, outer
rotation first; a joint 2-D sweep is available for cross-checking. Both end
with a bounded scalar polish inside one grid step.

With several paths the leakage of one path biases the search for another.
Paths are therefore refined in order of power against the measurement minus
the fit of the paths already found, and then again in rounds against the
measurement minus the joint fit of all other paths.

Row ``n`` (0-based) of the beamspace splits into an outer (vertical) bin
``n // N_h`` and an inner (horizontal) bin ``n % N_h``; ``ψ`` belongs to the
outer bin and ``ν`` to the inner one.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lstsq
from scipy.ndimage import maximum_filter
from scipy.optimize import minimize_scalar

from ..channel import EstimatorOptions
from ..config import logger
from ..errors import NoPeaksError
from ..geometry import (
    SpatialFrequencyPair,
    UpaShape,
    dft_transform_matrix,
    steering_matrix,
    steering_vector,
    upa_responses,
    wrap_frequency,
)

# Rotation polish stops at this step and must gain this relative power
POLISH_TOLERANCE = 1e-10
POLISH_MIN_GAIN = 1e-12

# Cancellation rounds end once no frequency moves by more than this
CANCELLATION_TOLERANCE = 1e-10


@dataclass
class AoaEstimate:
    """Detected BS paths and their refined spatial frequencies."""

    path_count: int
    peak_indices: list[int]
    antenna_indices: list[tuple[int, int]]
    rotations: list[tuple[float, float]]
    refined_pairs: np.ndarray
    steering_estimate: np.ndarray
    objective_evaluations: int = 0
    coarse_pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))


def beamspace_power(y1: np.ndarray, bs_shape: UpaShape) -> np.ndarray:
    """Row powers of ``Ũ^H Y_1``."""
    beams = dft_transform_matrix(bs_shape).conj().T @ y1
    return np.sum(np.abs(beams) ** 2, axis=1)


def dft_peak_detect(
    y1: np.ndarray,
    bs_shape: UpaShape,
    path_count: int | None = None,
    threshold_fraction: float | None = None,
) -> tuple[list[int], int]:
    """Find the significant beamspace rows (0-based) and their number.

    With ``path_count`` the strongest rows are returned (ties to the lowest
    row). Otherwise rows at or above ``threshold_fraction`` of the peak power
    that are also maxima of their 8-neighbourhood on the wrapped 2-D grid are
    returned in descending power.
    """
    if not np.any(y1):
        raise NoPeaksError("measurement is identically zero")
    power = beamspace_power(y1, bs_shape)
    order = np.argsort(-power, kind="stable")
    if path_count is not None:
        peaks = [int(n) for n in order[:path_count]]
        return peaks, len(peaks)

    fraction = 0.2 if threshold_fraction is None else threshold_fraction
    grid = power.reshape(bs_shape.vertical_count, bs_shape.horizontal_count)
    local_max = grid == maximum_filter(grid, size=3, mode="wrap")
    significant = local_max & (grid >= fraction * grid.max())
    peaks = [int(n) for n in order if significant.flat[n]]
    if not peaks:
        raise NoPeaksError(f"no beamspace row reaches {fraction:.2f} of the peak power")
    return peaks, len(peaks)


def split_index(n_l: int, bs_shape: UpaShape) -> tuple[int, int]:
    """1-based row ``n_l`` to 1-based (outer, inner) antenna indices."""
    inner_count = bs_shape.horizontal_count
    if not 1 <= n_l <= bs_shape.size:
        raise IndexError(f"beamspace index {n_l} outside 1..{bs_shape.size}")
    outer = -(-n_l // inner_count)
    inner = n_l - inner_count * (outer - 1)
    return outer, inner


def _coarse(bin_1based: int, count: int, spacing: float) -> float:
    freq = (bin_1based - 1) / count
    return freq - 1.0 if bin_1based > count * spacing else freq


def index_to_coarse_freq(n_l: int, bs_shape: UpaShape) -> SpatialFrequencyPair:
    """Coarse ``(ψ, ν)`` of a 1-based beamspace row, folded to negative values."""
    outer, inner = split_index(n_l, bs_shape)
    s = bs_shape.spacing_over_wavelength
    return SpatialFrequencyPair(
        _coarse(outer, bs_shape.vertical_count, s),
        _coarse(inner, bs_shape.horizontal_count, s),
    )


def rotation_grid(count: int, grid_size: int) -> np.ndarray:
    """Search grid over ``[-π/count, π/count)`` centred on zero.

    Point ``grid_size // 2`` is exactly zero for every grid size.
    """
    bound = np.pi / count
    return (np.arange(grid_size) - grid_size // 2) * (2 * bound / grid_size)


def rotation_objective(y1: np.ndarray, bs_shape: UpaShape, pair) -> float:
    """Beam power ``‖a_N(ψ, ν)^H Y_1‖² / N`` steered at one frequency pair."""
    response = upa_responses(bs_shape, [pair[0]], [pair[1]])[:, 0]
    return float(np.sum(np.abs(response.conj() @ y1) ** 2) / bs_shape.size)


def _line_objective(lines: np.ndarray, freqs) -> np.ndarray:
    """``‖a(f)^H X‖² / count`` for every ``f``; ``lines`` is ``count x τ``."""
    count = lines.shape[0]
    beams = steering_matrix(count, freqs).conj().T
    return np.sum(np.abs(beams @ lines) ** 2, axis=1) / count


def _fold_inner(cube: np.ndarray, nu: float) -> np.ndarray:
    """Steer every row of the array at ``ν``, leaving ``N_v x τ`` lines."""
    return np.einsum("h,vht->vt", steering_vector(cube.shape[1], nu).conj(), cube)


def _fold_outer(cube: np.ndarray, psi: float) -> np.ndarray:
    """Steer every column of the array at ``ψ``, leaving ``N_h x τ`` lines."""
    return np.einsum("v,vht->ht", steering_vector(cube.shape[0], psi).conj(), cube)


def _polish(objective, delta: float, step: float) -> tuple[float, int]:
    """Bounded scalar search within one grid step; kept only if it gains."""
    base = objective(delta)
    result = minimize_scalar(
        lambda d: -objective(d),
        bounds=(delta - step, delta + step),
        method="bounded",
        options={"xatol": POLISH_TOLERANCE},
    )
    if -result.fun > base * (1 + POLISH_MIN_GAIN):
        return float(result.x), result.nfev + 1
    return delta, result.nfev + 1


def _polish_pair(
    cube: np.ndarray,
    anchor: tuple[float, float],
    rotation: tuple[float, float],
    steps: tuple[float, float],
) -> tuple[float, float, int]:
    psi0, nu0 = anchor
    d_psi, d_nu = rotation
    rows = _fold_inner(cube, nu0 - d_nu / (2 * np.pi))
    d_psi, used_psi = _polish(
        lambda d: _line_objective(rows, [psi0 - d / (2 * np.pi)])[0], d_psi, steps[0]
    )
    columns = _fold_outer(cube, psi0 - d_psi / (2 * np.pi))
    d_nu, used_nu = _polish(
        lambda d: _line_objective(columns, [nu0 - d / (2 * np.pi)])[0], d_nu, steps[1]
    )
    return d_psi, d_nu, used_psi + used_nu


def _search_setup(y1, peak, bs_shape, grids, anchor):
    n_v, n_h = bs_shape.vertical_count, bs_shape.horizontal_count
    if anchor is None:
        outer, inner = peak
        anchor = index_to_coarse_freq((outer - 1) * n_h + inner, bs_shape)
    g1, g2 = grids
    steps = (2 * np.pi / (n_v * g1), 2 * np.pi / (n_h * g2))
    return (
        y1.reshape(n_v, n_h, -1),
        (float(anchor[0]), float(anchor[1])),
        rotation_grid(n_v, g1),
        rotation_grid(n_h, g2),
        steps,
    )


def angle_rotation_refine(
    y1: np.ndarray,
    peak: tuple[int, int],
    bs_shape: UpaShape,
    grids: tuple[int, int] = (64, 64),
    anchor: tuple[float, float] | None = None,
    polish: bool = True,
) -> tuple[float, float, int]:
    """Decomposed rotation search over the whole array.

    ``peak`` holds 1-based (outer, inner) antenna indices; its coarse DFT
    frequency is the ``anchor`` unless one is given. The outer rotation is
    searched with the inner one at zero, then the inner rotation at the best
    outer one. Each sweep steers the full array, so the objective is the beam
    power at ``anchor - Δ / 2π``. ``polish`` refines both rotations within one
    grid step by a bounded scalar search.

    Returns:
        ``(Δψ, Δν, evaluations)``
    """
    cube, anchor, outer_deltas, inner_deltas, steps = _search_setup(
        y1, peak, bs_shape, grids, anchor
    )
    psi0, nu0 = anchor

    outer_obj = _line_objective(_fold_inner(cube, nu0), psi0 - outer_deltas / (2 * np.pi))
    d_psi = float(outer_deltas[np.argmax(outer_obj)])
    columns = _fold_outer(cube, psi0 - d_psi / (2 * np.pi))
    inner_obj = _line_objective(columns, nu0 - inner_deltas / (2 * np.pi))
    d_nu = float(inner_deltas[np.argmax(inner_obj)])
    evaluations = outer_deltas.size + inner_deltas.size

    if polish:
        d_psi, d_nu, used = _polish_pair(cube, anchor, (d_psi, d_nu), steps)
        evaluations += used
    return d_psi, d_nu, evaluations


def joint_rotation_refine(
    y1: np.ndarray,
    peak: tuple[int, int],
    bs_shape: UpaShape,
    grids: tuple[int, int] = (64, 64),
    anchor: tuple[float, float] | None = None,
    polish: bool = True,
) -> tuple[float, float, int]:
    """Exhaustive 2-D rotation search, ``g1 * g2`` evaluations before polishing."""
    cube, anchor, outer_deltas, inner_deltas, steps = _search_setup(
        y1, peak, bs_shape, grids, anchor
    )
    psi0, nu0 = anchor
    n_v, n_h = cube.shape[:2]
    beams_v = steering_matrix(n_v, psi0 - outer_deltas / (2 * np.pi)).conj().T
    beams_h = steering_matrix(n_h, nu0 - inner_deltas / (2 * np.pi)).conj().T
    projected = np.einsum("av,bh,vht->abt", beams_v, beams_h, cube, optimize=True)
    objective = np.sum(np.abs(projected) ** 2, axis=2)
    a, b = np.unravel_index(np.argmax(objective), objective.shape)
    d_psi, d_nu = float(outer_deltas[a]), float(inner_deltas[b])
    evaluations = objective.size

    if polish:
        d_psi, d_nu, used = _polish_pair(cube, anchor, (d_psi, d_nu), steps)
        evaluations += used
    return d_psi, d_nu, evaluations


def _isolate_peak(
    beams: np.ndarray, unitary: np.ndarray, keep: int, drop: list[int]
) -> np.ndarray:
    masked = beams.copy()
    masked[[n for n in drop if n != keep]] = 0.0
    return unitary @ masked


def _path_fit(y1: np.ndarray, bs_shape: UpaShape, pairs: np.ndarray) -> np.ndarray:
    """Least-squares fit of ``Y_1`` on the responses of ``pairs``."""
    steering = upa_responses(bs_shape, pairs[:, 0], pairs[:, 1])
    return steering @ lstsq(steering, y1)[0]


def _frequency_gap(a, b) -> np.ndarray:
    return np.abs(wrap_frequency(np.asarray(a) - np.asarray(b)))


def estimate_common_aoa(
    y1: np.ndarray,
    bs_shape: UpaShape,
    path_count: int | None,
    options: EstimatorOptions | None = None,
) -> AoaEstimate:
    """Run peak detection and rotation refinement for every detected path.

    Paths are refined in descending beam power. Each one is searched after
    the fit of the paths before it is subtracted, with the rows of the paths
    after it masked out when ``peak_isolation`` is on. Later rounds refine
    every path again against ``Y_1`` minus the joint least-squares fit of
    all other paths, until no frequency moves by more than
    ``CANCELLATION_TOLERANCE`` or ``cancellation_rounds`` is spent.
    """
    options = options or EstimatorOptions()
    known = path_count if options.peak_mode == "known" else None
    peaks, count = dft_peak_detect(y1, bs_shape, known, options.peak_threshold)

    unitary = dft_transform_matrix(bs_shape)
    refine = joint_rotation_refine if options.joint_rotation else angle_rotation_refine
    grids = options.rotation_grid
    s = bs_shape.spacing_over_wavelength
    antenna = [split_index(n + 1, bs_shape) for n in peaks]
    coarse = np.array([index_to_coarse_freq(n + 1, bs_shape) for n in peaks], dtype=float)
    refined = np.zeros((count, 2))
    evaluations = 0

    def refine_path(source: np.ndarray, i: int, anchor) -> np.ndarray:
        nonlocal evaluations
        d_psi, d_nu, used = refine(
            source, antenna[i], bs_shape, grids, tuple(anchor), options.rotation_polish
        )
        evaluations += used
        return np.array(
            [
                wrap_frequency(anchor[0] - d_psi / (2 * np.pi), s),
                wrap_frequency(anchor[1] - d_nu / (2 * np.pi), s),
            ]
        )

    for i, n in enumerate(peaks):
        source = y1 - _path_fit(y1, bs_shape, refined[:i]) if i else y1
        if options.peak_isolation:
            source = _isolate_peak(unitary.conj().T @ source, unitary, n, peaks[i + 1 :])
        refined[i] = refine_path(source, i, coarse[i])

    rounds = options.cancellation_rounds if count > 1 else 0
    for round_index in range(rounds):
        change = 0.0
        for i in range(count):
            others = np.delete(refined, i, axis=0)
            updated = refine_path(y1 - _path_fit(y1, bs_shape, others), i, refined[i])
            change = max(change, float(_frequency_gap(updated, refined[i]).max()))
            refined[i] = updated
        logger.debug(f"Stage I: cancellation round {round_index + 1}, largest move {change:.3e}")
        if change < CANCELLATION_TOLERANCE:
            break

    offsets = wrap_frequency(coarse - refined)
    rotations = [(float(2 * np.pi * a), float(2 * np.pi * b)) for a, b in offsets]
    logger.debug(f"Stage I: {count} paths at rows {peaks}, refined {refined.tolist()}")
    return AoaEstimate(
        path_count=count,
        peak_indices=peaks,
        antenna_indices=antenna,
        rotations=rotations,
        refined_pairs=refined,
        steering_estimate=upa_responses(bs_shape, refined[:, 0], refined[:, 1]),
        objective_evaluations=evaluations,
        coarse_pairs=coarse,
    )
