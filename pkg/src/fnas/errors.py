"""Exception hierarchy shared by all fnas modules."""


class FnasError(Exception):
    """Base class for every error raised by the package."""


class DimensionError(FnasError, ValueError):
    pass


class ShapeError(DimensionError):
    pass


class NumericError(FnasError, ArithmeticError):
    pass


class ConfigError(FnasError, ValueError):
    pass


class CheckpointError(FnasError, IOError):
    pass


class SchemaError(FnasError, ValueError):
    pass


class ValidationError(FnasError, ValueError):
    pass


class DomainError(FnasError, ValueError):
    pass


class LookupFailure(FnasError, KeyError):
    """Raised when a tabular benchmark has no row for the queried tokens."""

    def __init__(self, token_string):
        super().__init__(token_string)
        self.token_string = token_string

    def __str__(self):
        return f"no benchmark row for tokens {self.token_string!r}"


class TrainingError(FnasError, RuntimeError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class ConstraintStarvation(FnasError, RuntimeError):
    pass


class TransferError(FnasError, ValueError):
    pass


class FairnessError(FnasError, ValueError):
    pass


class EmptyBufferError(FnasError, ValueError):
    pass


class InsufficientEntries(FnasError, ValueError):
    pass


class CompositionError(FnasError, ValueError):
    pass


class StatisticError(FnasError, ValueError):
    pass


class ComparabilityError(FnasError, ValueError):
    pass


class ResumeError(FnasError, RuntimeError):
    pass


class RunAborted(FnasError, RuntimeError):
    """A module error interrupted `run`; carries the iteration and checkpoint."""

    def __init__(self, message, iteration, checkpoint=None):
        super().__init__(message)
        self.iteration = iteration
        self.checkpoint = checkpoint
