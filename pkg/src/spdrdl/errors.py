"""Exception hierarchy shared by every module of the package."""


class SpdrdlError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SpdrdlError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(SpdrdlError, ValueError):
    """A value lies outside the mathematical domain of an operation."""


class AxisError(SpdrdlError, ValueError):
    pass


class GraphError(SpdrdlError, RuntimeError):
    """Misuse of the gradient tape (e.g. backward from a non-scalar)."""


class ConfigError(SpdrdlError, ValueError):
    pass


class MissingShiftError(SpdrdlError, ValueError):
    """A target-class sample arrived without its ground-truth shift."""


class CheckpointError(SpdrdlError, IOError):
    pass


class VersionError(CheckpointError):
    pass


class CorruptFileError(CheckpointError):
    pass


class DatasetError(SpdrdlError, IOError):
    pass


class NumericalError(SpdrdlError, FloatingPointError):
    """Training produced a non-finite value."""
