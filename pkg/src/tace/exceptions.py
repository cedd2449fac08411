"""Exception hierarchy shared by every module of the engine."""


class TaceError(Exception):
    """Base class for all engine errors."""


class UnsupportedRankError(TaceError, ValueError):
    pass


class InvalidSignatureError(TaceError, ValueError):
    pass


class ShapeError(TaceError, ValueError):
    pass


class InvalidCellError(TaceError, ValueError):
    pass


class ParseError(TaceError, ValueError):
    """Malformed extended-XYZ or trajectory input; carries the offending line number."""

    def __init__(self, message, line=None, frame=None):
        self.line = line
        self.frame = frame
        where = []
        if frame is not None:
            where.append(f"frame {frame}")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class DomainError(TaceError, ValueError):
    pass


class UnknownElementError(TaceError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown element"


class UnknownLabelError(TaceError, ValueError):
    pass


class MissingAttributeError(TaceError, ValueError):
    pass


class ConfigurationError(TaceError, ValueError):
    pass


class PositivityError(TaceError, ValueError):
    pass


class WrongVariantError(TaceError, ValueError):
    pass


class GeometryError(TaceError, ValueError):
    pass


class CapabilityError(TaceError, RuntimeError):
    pass


class InsufficientDataError(TaceError, ValueError):
    pass


class NumericalError(TaceError, FloatingPointError):
    """Raised when a loss or prediction turns non-finite."""
