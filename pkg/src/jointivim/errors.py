"""Exception types raised across the package."""


class InvalidArgumentError(ValueError):
    """An input violates a documented precondition."""


class ShapeMismatchError(ValueError):
    """Array shapes that must agree do not."""


class DegenerateInputError(ValueError):
    """Input data carries no usable information (all zeros, zero variance, ...)."""


class ConfigError(ValueError):
    """A configuration value or file is invalid."""


class NonFiniteLossError(RuntimeError):
    """The joint objective became NaN or infinite during optimization."""

    def __init__(self, iteration, message=None):
        self.iteration = iteration
        super().__init__(message or f"non-finite loss at iteration {iteration}")


class GridSearchError(RuntimeError):
    """Every grid point failed to produce a usable score."""

    def __init__(self, message, table):
        self.table = table
        super().__init__(message)
