"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Shapes of operands are inconsistent."""


class ConvergenceError(RuntimeError):
    """An iterative routine exhausted its iteration budget."""


class SingularMatrixError(ValueError):
    """A matrix required to be invertible is numerically singular."""


class DegenerateSpectrumError(ValueError):
    """A spectrum is entirely non-positive, so no condition number exists."""


class InsufficientSamplesError(ValueError):
    """Too few samples to estimate the requested statistic."""


class InsufficientBatchError(ValueError):
    """Batch statistics need at least two examples."""


class NumericError(FloatingPointError):
    """A non-finite value appeared where finite numbers are required."""


class ConsistencyError(ValueError):
    """A trace or state object does not match the operation applied to it."""


class DivergenceError(RuntimeError):
    """Training loss became non-finite; carries a diagnostic record."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record or {}


class FisherSizeError(ValueError):
    """A Fisher block would exceed the tractability cap."""


class IdxFormatError(ValueError):
    """An IDX file is malformed; ``offset`` is the failing byte position."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class MetricsParseError(ValueError):
    """A metrics CSV file is malformed; ``line`` is the 1-based line number."""

    def __init__(self, message, line):
        super().__init__(f"{message} (line {line})")
        self.line = line


class ConfigError(ValueError):
    """An experiment configuration failed schema validation."""

    def __init__(self, message, keys=()):
        keys = tuple(keys)
        if keys:
            message = f"{message}: {', '.join(keys)}"
        super().__init__(message)
        self.keys = keys
