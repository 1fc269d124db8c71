"""Exception hierarchy shared across the package."""


class MemGanError(Exception):
    """Base class for all errors raised by memgan."""


class InvalidDimensionError(MemGanError, ValueError):
    pass


class DimensionMismatchError(MemGanError, ValueError):
    pass


class ShapeMismatchError(MemGanError, ValueError):
    pass


class EmptyCandidateSetError(MemGanError, LookupError):
    """No memory slot carries the requested label."""


class NoRealSlotsError(MemGanError, LookupError):
    """The memory holds no slot with v = 1 and positive histogram mass."""


class DegenerateHistogramError(MemGanError, ArithmeticError):
    pass


class MissingCacheError(MemGanError, ValueError):
    pass


class BadMagicError(MemGanError, ValueError):
    pass


class TruncatedFileError(MemGanError, ValueError):
    pass


class InvalidConfigError(MemGanError, ValueError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class IncompatibleCheckpointError(MemGanError, ValueError):
    pass


class InsufficientRealSlotsError(MemGanError, LookupError):
    pass
