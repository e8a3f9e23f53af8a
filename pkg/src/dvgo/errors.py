class InvalidInputError(ValueError):
    """Raised when an argument violates an operation's preconditions."""


class LoadError(RuntimeError):
    """Raised when a dataset, grid file or checkpoint cannot be read."""
