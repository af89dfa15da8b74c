"""Exception hierarchy shared across the package."""


class EPLError(Exception):
    """Base class for all package errors."""


class ShapeError(EPLError, ValueError):
    pass


class NumericError(EPLError, ArithmeticError):
    pass


class EmptyReductionError(EPLError, ValueError):
    pass


class DomainError(EPLError, ValueError):
    pass


class ConflictError(EPLError, ArithmeticError):
    """Total conflict between two mass assignments at one or more voxels."""

    def __init__(self, message, voxels=()):
        super().__init__(message)
        self.voxels = [tuple(int(c) for c in v) for v in voxels]


class SpecError(EPLError, ValueError):
    pass


class FormatError(EPLError, ValueError):
    pass


class UndefinedMetric(EPLError, ValueError):
    pass


class IoError(EPLError, OSError):
    pass
