"""Exception types shared across the package.

The CLI maps these onto process exit codes (3 for data problems, 4 for
numerical failures).
"""


class ThreeETError(Exception):
    """Base class for all package errors."""


class ShapeError(ThreeETError, ValueError):
    """Operands have incompatible shapes."""


class NumericalError(ThreeETError, ArithmeticError):
    """A tensor picked up a NaN or Inf."""


class DatasetError(ThreeETError):
    """A dataset directory or file failed validation."""

    def __init__(self, message, *, path=None, offset=None):
        self.path = path
        self.offset = offset
        parts = [message]
        if path is not None:
            parts.append(f"file={path}")
        if offset is not None:
            parts.append(f"byte_offset={offset}")
        super().__init__("; ".join(parts))


class WeightFileError(ThreeETError):
    """A weight file is malformed or does not match the running config."""

    def __init__(self, message, *, tensor=None):
        self.tensor = tensor
        if tensor is not None:
            message = f"{message} (tensor '{tensor}')"
        super().__init__(message)
