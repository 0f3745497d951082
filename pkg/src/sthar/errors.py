"""Exception hierarchy shared by every module."""


class SthArError(Exception):
    """Base class for all library errors."""


class DimensionError(SthArError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(SthArError, ValueError):
    """A precondition of an operation was violated."""


class CapacityError(ContractError):
    """A sequence is longer than a fixed-size table allows."""


class NumericError(SthArError, ArithmeticError):
    """NaN or otherwise invalid numeric input."""


class ConfigError(SthArError, ValueError):
    """A configuration is internally inconsistent or invalid."""


class IngestionError(SthArError, OSError):
    """A dataset on disk is malformed."""


class CheckpointError(SthArError, ValueError):
    """A checkpoint file is corrupt or incompatible."""


class TrainingError(SthArError, RuntimeError):
    """Training diverged."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step
