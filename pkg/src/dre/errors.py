"""Exception hierarchy shared across the package."""


class DreError(Exception):
    """Base class for all errors raised by :mod:`dre`."""


class ShapeError(DreError, ValueError):
    """Array dimensions do not match what an operation expects."""


class NumericError(DreError, ArithmeticError):
    """A non-finite value appeared during a network evaluation."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class DivergenceError(DreError, ArithmeticError):
    """A fixed-step integration blew up."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class StiffnessError(DreError, ArithmeticError):
    """The adaptive integrator's step size underflowed."""


class CheckpointError(DreError, ValueError):
    """A checkpoint or bundle file is malformed."""


class ConfigError(DreError, ValueError):
    """Inconsistent configuration (strategy vs dataset, bad loss spec, ...)."""
