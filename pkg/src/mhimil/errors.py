"""Exception hierarchy shared by every module of the package."""


class MhimilError(Exception):
    """Base class for all package errors."""


class ShapeError(MhimilError, ValueError):
    """Operand shapes are incompatible."""

    def __init__(self, message, *shapes):
        if shapes:
            message = f"{message}: " + " vs ".join(str(s if s is None else tuple(s)) for s in shapes)
        super().__init__(message)
        self.shapes = tuple(s if s is None else tuple(s) for s in shapes)


class RankError(ShapeError):
    """A scalar was required but a higher-rank tensor was given."""


class DegenerateMaskError(MhimilError, ValueError):
    """Every position of a softmax row is masked."""


class EmptyBagError(MhimilError, ValueError):
    """A bag (or sequence) with no instances was given."""


class NumericError(MhimilError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class ScheduleRangeError(MhimilError, ValueError):
    """A schedule was queried outside its step range."""


class PlanMismatchError(MhimilError, IndexError):
    """A mask plan references an index outside the bag."""


class ConfigError(MhimilError, ValueError):
    """Invalid or inconsistent configuration."""


class DataError(MhimilError, ValueError):
    """Base for dataset and checkpoint content problems."""


class DataParseError(DataError):
    """A file could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(DataError):
    """Parsed content violates the expected schema."""


class SearchError(MhimilError, RuntimeError):
    """Every cell of a hyperparameter search failed."""
