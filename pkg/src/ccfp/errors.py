"""Exception types shared across the package."""


class CCFPError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(CCFPError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ContractError(CCFPError, RuntimeError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class ConfigError(CCFPError, ValueError):
    """Invalid configuration, unknown domain, empty split, bad flag value."""


class IdxFormatError(CCFPError, ValueError):
    """IDX file has an unexpected magic number or malformed header."""


class IdxLengthError(IdxFormatError):
    """IDX payload is shorter than its header declares."""


class IdxConsistencyError(CCFPError, ValueError):
    """Image and label files disagree on the number of items."""


class AggregationError(CCFPError, ValueError):
    """A result group is empty."""


class TrainingAborted(CCFPError, RuntimeError):
    """Training hit a non-finite loss.

    ``record`` carries the diagnostic values of the offending step.
    """

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = dict(record or {})
