"""Exception hierarchy shared by all modules."""


class FlowReconError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(FlowReconError, ValueError):
    """Invalid configuration value or inconsistent settings."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class DimensionError(FlowReconError, ValueError):
    """Array lengths or shapes do not agree."""


class NumericError(FlowReconError, ArithmeticError):
    """A non-finite value appeared in a computation."""

    def __init__(self, message, value=None, index=None):
        super().__init__(message)
        self.value = value
        self.index = index


class TrainingError(NumericError):
    """Optimization diverged; ``step`` is the offending iteration."""

    def __init__(self, message, step=None, last_finite=None):
        super().__init__(message, index=step)
        self.step = step
        self.last_finite = last_finite


class InvariantError(FlowReconError, ValueError):
    """A domain invariant (e.g. a mixing weight outside [0, 1]) is violated."""
