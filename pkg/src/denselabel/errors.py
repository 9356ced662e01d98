"""Exception types shared across the package."""


class ShapeError(ValueError):
    """An array argument has an incompatible or degenerate shape."""


class GraphError(ValueError):
    """A network graph is malformed (cycle, dangling edge, bad wiring)."""


class ConfigError(ValueError):
    """A configuration file or value is invalid."""


class DataError(Exception):
    """A data file is unreadable, truncated or fails its integrity check."""


class StateError(RuntimeError):
    """An operation was invoked before its required state exists."""


class NumericError(RuntimeError):
    """Training or verification produced a non-finite or failing result."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration
