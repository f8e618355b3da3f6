"""Exception types shared across the package."""


class DomainError(ValueError):
    """An elementary operation was evaluated outside its domain."""


class UsageError(RuntimeError):
    """An API was called in a way its contract forbids."""


class DegeneracyError(ArithmeticError):
    """The particle approximation of the likelihood collapsed.

    ``step`` is the 1-based time index at which the collapse was detected,
    or ``None`` when it cannot be attributed to a single step.
    """

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class SimulationError(ArithmeticError):
    """A simulated trajectory left the finite reals."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ConfigError(ValueError):
    """An experiment configuration failed validation."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field
