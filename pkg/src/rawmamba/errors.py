"""Exception hierarchy shared by every module."""


class RawMambaError(Exception):
    """Base class for all package errors."""


class DimensionError(RawMambaError, ValueError):
    """Tensor shapes or extents do not agree."""


class ConfigurationError(RawMambaError, ValueError):
    """A static configuration value is invalid."""


class ParameterError(RawMambaError, ValueError):
    """A numerical parameter violates its domain (e.g. a non-positive timescale)."""


class ContractError(RawMambaError, ValueError):
    """A call-level precondition is violated."""


class EvaluationError(RawMambaError, ArithmeticError):
    """A computation produced non-finite values."""


class LoadError(RawMambaError, OSError):
    """A file or checkpoint could not be read."""


class DivergenceError(EvaluationError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
