"""Exception types shared across the toolkit."""


class RescalkitError(Exception):
    """Base class for all toolkit errors."""


class DataError(RescalkitError):
    """Invalid tensor data: bad file, negative values, shape mismatch."""


class NumericalError(RescalkitError):
    """Non-finite values encountered during optimization (fatal)."""


class GridError(RescalkitError):
    """Process-grid failures: bad grid size, mismatched collectives."""


class GridDeadlockError(GridError):
    """A collective timed out because ranks disagreed on the next operation."""
