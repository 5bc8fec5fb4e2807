"""Exception types shared across the package."""


class SinkclustError(Exception):
    """Base class for all package errors."""


class ShapeError(SinkclustError, ValueError):
    """Array dimensions are inconsistent."""


class NumericError(SinkclustError, ArithmeticError):
    """A computation produced NaN/Inf or another non-finite state."""


class ParseError(SinkclustError, ValueError):
    """A dataset or checkpoint file is malformed."""

    def __init__(self, message, *, path=None, line=None, offset=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"offset {offset}")
        if where:
            message = f"{': '.join([', '.join(where), message])}"
        super().__init__(message)
        self.path = path
        self.line = line
        self.offset = offset
