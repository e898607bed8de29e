"""
Array Geometry
==============

Array response vectors of uniform planar arrays, the unitary 2-D DFT used for
beamspace peak finding, the group rearrangement of RIS elements and the
overcomplete angular dictionaries built on top of them.

Conventions used throughout the package:

- A planar response is ``kron(a_v(z), a_h(x))``: the vertical factor is the
  outer one, so element ``(i_v, i_h)`` sits at index ``i_v * P_h + i_h``.
- RIS vectors are always stored in *rearranged* order, i.e. the ``M̄``
  elements of group ``g`` occupy the contiguous slice ``g*M̄:(g+1)*M̄``.
- Every index is 0-based unless a function says otherwise.
"""

from dataclasses import dataclass
from functools import lru_cache
from math import isqrt
from typing import NamedTuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.linalg import dft


class SpatialFrequencyPair(NamedTuple):
    """A (vertical, horizontal) spatial frequency pair ``(z, x)``."""

    vertical_freq: float
    horizontal_freq: float


class UpaShape(BaseModel):
    """Dimensions of a uniform planar array."""

    model_config = ConfigDict(frozen=True)

    horizontal_count: int = Field(..., ge=1)
    vertical_count: int = Field(..., ge=1)
    spacing_over_wavelength: float = Field(0.5, gt=0)

    @property
    def size(self) -> int:
        return self.horizontal_count * self.vertical_count

    def frequency_range(self) -> tuple[float, float]:
        """Half-open range ``[-d/λ, d/λ)`` of admissible spatial frequencies."""
        s = self.spacing_over_wavelength
        return -s, s


class GroupLayout(BaseModel):
    """Partition of a RIS into ``G`` equally sized groups."""

    model_config = ConfigDict(frozen=True)

    shape: UpaShape
    group_count: int = Field(..., ge=1)

    @property
    def element_count(self) -> int:
        return self.shape.size

    @property
    def group_size(self) -> int:
        return self.element_count // self.group_count

    @property
    def training_length(self) -> int:
        """Length ``M̄²G`` of one vectorized scattering configuration."""
        return self.group_size**2 * self.group_count

    @model_validator(mode="after")
    def _check_grouping(self) -> "GroupLayout":
        m = self.element_count
        if m % self.group_count:
            raise ValueError(
                f"group_count {self.group_count} does not divide M={m}"
            )
        if _grouping_rule(
            self.shape.horizontal_count, self.shape.vertical_count, self.group_size
        ) is None:
            raise ValueError(
                f"group size {self.group_size} cannot tile a "
                f"{self.shape.horizontal_count}x{self.shape.vertical_count} array: "
                "it must divide both dimensions or be a square whose side does"
            )
        return self


def _formula_permutation(m_h: int, m_v: int, m_bar: int) -> np.ndarray:
    i = np.arange(m_h * m_v)
    return (
        m_bar * m_v * (i // (m_bar * m_v))
        + m_v * ((i // m_bar) % m_bar)
        + (i % m_bar)
        + m_bar * ((i // m_bar**2) % (m_v // m_bar))
    )


def _square_tile_permutation(m_h: int, m_v: int, side: int) -> np.ndarray:
    tiles_h = m_h // side
    i = np.arange(m_h * m_v)
    group, local = np.divmod(i, side * side)
    tile_v, tile_h = np.divmod(group, tiles_h)
    local_v, local_h = np.divmod(local, side)
    return (tile_v * side + local_v) * m_h + tile_h * side + local_h


@lru_cache(maxsize=None)
def _grouping_rule(m_h: int, m_v: int, m_bar: int) -> tuple[int, ...] | None:
    m = m_h * m_v
    if m_bar == 0 or m % m_bar:
        return None
    side = isqrt(m_bar)
    if side * side == m_bar and m_h % side == 0 and m_v % side == 0:
        return tuple(int(j) for j in _square_tile_permutation(m_h, m_v, side))
    if m_v % m_bar == 0 and m_h % m_bar == 0:
        perm = _formula_permutation(m_h, m_v, m_bar)
        if np.array_equal(np.sort(perm), np.arange(m)):
            return tuple(int(j) for j in perm)
    return None


def steering_vector(length: int, freq: float) -> np.ndarray:
    """Uniform linear array response ``exp(-j 2π i f)`` for ``i = 0..length-1``."""
    return np.exp(-2j * np.pi * np.arange(length) * freq)


def steering_matrix(length: int, freqs) -> np.ndarray:
    """Stack steering vectors for several frequencies as columns."""
    freqs = np.atleast_1d(np.asarray(freqs, dtype=float))
    return np.exp(-2j * np.pi * np.outer(np.arange(length), freqs))


def upa_response(shape: UpaShape, pair: SpatialFrequencyPair) -> np.ndarray:
    """Planar array response ``a_v(z) ⊗ a_h(x)``."""
    z, x = pair
    return np.kron(
        steering_vector(shape.vertical_count, z),
        steering_vector(shape.horizontal_count, x),
    )


def upa_responses(shape: UpaShape, vertical_freqs, horizontal_freqs) -> np.ndarray:
    """Column-wise planar responses, one column per frequency pair."""
    a_v = steering_matrix(shape.vertical_count, vertical_freqs)
    a_h = steering_matrix(shape.horizontal_count, horizontal_freqs)
    return (a_v[:, None, :] * a_h[None, :, :]).reshape(shape.size, -1)


def rearrangement_permutation(layout: GroupLayout) -> np.ndarray:
    """Map rearranged index ``i`` to raw planar index ``j``.

    Square group sizes whose side divides both array dimensions tile the
    array with square sub-arrays visited horizontally-then-vertically. Such
    a group spans both directions, so the vertical and horizontal offsets of
    a group stay separately visible in its response. Other layouts use the
    closed-form two-level ordering, which needs the group size to divide
    both array dimensions.
    """
    rule = _grouping_rule(
        layout.shape.horizontal_count, layout.shape.vertical_count, layout.group_size
    )
    return np.array(rule, dtype=int)


def rearranged_upa_response(
    layout: GroupLayout, pair: SpatialFrequencyPair
) -> np.ndarray:
    return upa_response(layout.shape, pair)[rearrangement_permutation(layout)]


def rearranged_upa_responses(
    layout: GroupLayout, vertical_freqs, horizontal_freqs
) -> np.ndarray:
    responses = upa_responses(layout.shape, vertical_freqs, horizontal_freqs)
    return responses[rearrangement_permutation(layout)]


def dft_transform_matrix(shape: UpaShape) -> np.ndarray:
    """Unitary 2-D DFT ``U_{N_v} ⊗ U_{N_h}`` ordered like ``upa_response``.

    Row ``n = k_v * N_h + k_h`` of ``U^H`` responds to the on-grid frequency
    pair ``(k_v / N_v, k_h / N_h)``.
    """
    return np.kron(
        dft(shape.vertical_count, scale="sqrtn"),
        dft(shape.horizontal_count, scale="sqrtn"),
    )


def wrap_frequency(freq, spacing_over_wavelength: float = 0.5):
    """Fold frequencies shifted by whole periods back into ``[-d/λ, d/λ)``."""
    freq = np.asarray(freq, dtype=float)
    folded = np.where(freq >= spacing_over_wavelength, freq - 1.0, freq)
    folded = np.where(folded < -spacing_over_wavelength, folded + 1.0, folded)
    return folded if folded.ndim else float(folded)


def dft_grid_frequencies(shape: UpaShape) -> tuple[np.ndarray, np.ndarray]:
    """Frequency pair of every 2-D DFT bin, in ``dft_transform_matrix`` order."""
    s = shape.spacing_over_wavelength
    k_v, k_h = np.divmod(np.arange(shape.size), shape.horizontal_count)
    return (
        wrap_frequency(k_v / shape.vertical_count, s),
        wrap_frequency(k_h / shape.horizontal_count, s),
    )


@dataclass(frozen=True)
class AngularDictionary:
    """Overcomplete dictionary of rearranged planar responses.

    Column ``c = g_v * D_h + g_h`` is the response at
    ``((-1 + 2 g_v / D_v) d/λ, (-1 + 2 g_h / D_h) d/λ)``.
    """

    layout: GroupLayout
    atoms: np.ndarray
    vertical_grid_size: int
    horizontal_grid_size: int
    vertical_freqs: np.ndarray
    horizontal_freqs: np.ndarray

    @property
    def size(self) -> int:
        return self.atoms.shape[1]

    @property
    def grid_frequencies(self) -> list[SpatialFrequencyPair]:
        return [
            SpatialFrequencyPair(float(z), float(x))
            for z, x in zip(self.vertical_freqs, self.horizontal_freqs)
        ]

    def group_blocks(self) -> np.ndarray:
        """Atoms split by group, shape ``(G, M̄, D)``."""
        g = self.layout.group_count
        return self.atoms.reshape(g, self.layout.group_size, self.size)

    def grid_index(self, column: int) -> tuple[int, int]:
        """Decode a column into its ``(g_v, g_h)`` grid coordinates."""
        g_v, g_h = divmod(int(column), self.horizontal_grid_size)
        return g_v, g_h

    def nearest_column(self, pair: SpatialFrequencyPair) -> int:
        """Column whose grid point is closest to ``pair`` modulo one period."""
        z, x = pair
        dz = np.abs((self.vertical_freqs - z + 0.5) % 1.0 - 0.5)
        dx = np.abs((self.horizontal_freqs - x + 0.5) % 1.0 - 0.5)
        return int(np.argmin(dz + dx))


def build_dictionary(
    layout: GroupLayout, vertical_grid: int, horizontal_grid: int
) -> AngularDictionary:
    """Build the rearranged angular dictionary on a ``D_v x D_h`` grid."""
    shape = layout.shape
    if vertical_grid < shape.vertical_count or horizontal_grid < shape.horizontal_count:
        raise ValueError(
            f"dictionary grid {vertical_grid}x{horizontal_grid} is smaller than the "
            f"{shape.vertical_count}x{shape.horizontal_count} array"
        )
    s = shape.spacing_over_wavelength
    g_v, g_h = np.divmod(np.arange(vertical_grid * horizontal_grid), horizontal_grid)
    vertical_freqs = (-1.0 + 2.0 * g_v / vertical_grid) * s
    horizontal_freqs = (-1.0 + 2.0 * g_h / horizontal_grid) * s
    atoms = rearranged_upa_responses(layout, vertical_freqs, horizontal_freqs)
    atoms.setflags(write=False)
    return AngularDictionary(
        layout=layout,
        atoms=atoms,
        vertical_grid_size=vertical_grid,
        horizontal_grid_size=horizontal_grid,
        vertical_freqs=vertical_freqs,
        horizontal_freqs=horizontal_freqs,
    )


@lru_cache(maxsize=32)
def cached_dictionary(
    layout: GroupLayout, vertical_grid: int, horizontal_grid: int
) -> AngularDictionary:
    """Memoized ``build_dictionary``; dictionaries are immutable once built."""
    return build_dictionary(layout, vertical_grid, horizontal_grid)
