"""Exception types shared across the package."""


class CapacityError(ValueError):
    """Sequence space exceeds the enumerability budget."""


class ConsistencyError(RuntimeError):
    """Two data structures that must describe the same object disagree."""


class NumericalError(ArithmeticError):
    """A loss or gradient became non-finite; the update was rejected."""


class ConfigError(ValueError):
    """Experiment configuration failed to parse or validate."""
