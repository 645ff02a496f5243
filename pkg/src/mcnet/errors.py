class MCNetError(Exception):
    pass


class DimensionMismatchError(MCNetError, ValueError):
    pass


class CheckpointError(MCNetError):
    pass


class DataError(MCNetError):
    """Unreadable, missing or inconsistent input data."""


class NonFiniteLossError(MCNetError, FloatingPointError):
    def __init__(self, message: str, names=()):
        super().__init__(message)
        self.names = list(names)
