"""Exception types shared across the package."""


class PopctrlError(Exception):
    """Base class for all errors raised by popctrl."""


class ConfigurationError(PopctrlError):
    """A model, geometry, grid or scenario is malformed."""


class DomainError(PopctrlError):
    """An argument is outside the domain an operation is defined on."""


class DimensionError(PopctrlError):
    """Array sizes do not match the grid they are used with."""


class NumericalFailure(PopctrlError):
    """A solve produced NaNs or overflowed; carries the failing step index."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ConsistencyError(PopctrlError):
    """Two objects that must share data (grid, frozen trace) do not."""
