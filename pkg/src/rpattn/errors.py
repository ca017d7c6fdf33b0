"""Exception types shared across the package."""


class RpattnError(Exception):
    """Base class for all package errors."""


class ShapeError(RpattnError, ValueError):
    """Operand shapes do not conform."""

    def __init__(self, message, *shapes):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)
        self.shapes = shapes


class NumericDomainError(RpattnError, FloatingPointError):
    """A forward op received or produced NaN/Inf."""


class UsageError(RpattnError):
    """An API was called in a way its contract forbids."""


class EmptySentenceError(RpattnError, ValueError):
    pass


class EmptyRegionError(RpattnError, ValueError):
    pass


class BatchSizeError(RpattnError, ValueError):
    pass


class ContractError(RpattnError, ValueError):
    """Input violates a documented precondition (e.g. a box outside [0, 1])."""


class ConfigError(RpattnError, ValueError):
    pass


class IngestionError(RpattnError, ValueError):
    """Malformed dataset on disk. Carries the offending file and record index."""

    def __init__(self, message, path=None, record=None):
        where = []
        if path is not None:
            where.append(str(path))
        if record is not None:
            where.append(f"record {record}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.path = path
        self.record = record
