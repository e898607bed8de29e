"""Exception types raised by the estimation library.

Each class also derives from the closest built-in exception so callers that
only know about ``ValueError`` or ``ArithmeticError`` still catch them.
"""


class EstimationError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(EstimationError, ValueError):
    """A scenario, layout or campaign description is invalid."""


class DimensionError(EstimationError, ValueError):
    """Array shapes do not match the configured structure."""


class SingularBlockError(EstimationError, ArithmeticError):
    """A per-group matrix that must be inverted is singular."""

    def __init__(self, group: int, message: str | None = None):
        self.group = group
        super().__init__(message or f"block {group} is singular")


class ZeroColumnError(EstimationError, ValueError):
    """A dictionary column has zero norm."""

    def __init__(self, column: int):
        self.column = column
        super().__init__(f"dictionary column {column} has zero norm")


class ZeroMeasurementError(EstimationError, ValueError):
    """A measurement that must carry energy is identically zero."""


class NoPeaksError(EstimationError):
    """Peak detection found no significant DFT rows."""


class DegenerateCorrelationError(EstimationError, ArithmeticError):
    """Every candidate in a correlation search vanished."""


class MemoryBudgetError(EstimationError, MemoryError):
    """An implicit dictionary exceeds the configured element budget."""
