"""Exception hierarchy shared by all modules."""


class FracSdeError(Exception):
    """Base class for all package errors."""


class ParameterError(FracSdeError, ValueError):
    """Invalid distribution, network or solver parameters."""


class NumericError(FracSdeError, ArithmeticError):
    """A numerical routine failed to converge or produced non-finite values."""

    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class SimulationError(NumericError):
    """An SDE step produced non-finite values or failed to solve."""


class TrainingError(NumericError):
    """Non-finite loss or gradient during optimisation.

    ``epoch`` is the offending epoch and ``last_good`` the most recent finite
    parameter pytree (``None`` if the failure occurred before any update).
    """

    def __init__(self, message, epoch, last_good=None, **diagnostics):
        super().__init__(message, **diagnostics)
        self.epoch = epoch
        self.last_good = last_good


class CapabilityError(FracSdeError, NotImplementedError):
    """The requested operation is not available for this configuration."""


class ConfigError(FracSdeError, ValueError):
    """Invalid experiment configuration."""

    def __init__(self, message, key=None, line=None):
        where = ""
        if key is not None:
            where = f" [key '{key}'" + (f", line {line}" if line is not None else "") + "]"
        super().__init__(message + where)
        self.key = key
        self.line = line
