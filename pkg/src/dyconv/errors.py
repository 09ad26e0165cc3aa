"""Exception hierarchy shared by every dyconv module."""


class DyConvError(Exception):
    """Base class for all dyconv errors."""


class ShapeError(DyConvError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(DyConvError, ValueError):
    """A layer, schedule or run configuration is invalid."""


class StateError(DyConvError, RuntimeError):
    """An object is used before the state it needs has been initialized."""


class InvariantError(DyConvError, RuntimeError):
    """A mathematical invariant (e.g. attention on the simplex) is violated."""


class DataError(DyConvError, ValueError):
    """Dataset contents are unusable (bad labels, empty split, length mismatch)."""


class FormatError(DataError):
    """A file does not follow its binary/text format."""


class DivergenceError(DyConvError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch
