"""Exception types shared across the package."""


class NBSegError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(NBSegError, ValueError):
    pass


class InvalidStateError(NBSegError, RuntimeError):
    pass


class CorruptCheckpointError(NBSegError):
    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class InsufficientTissueError(NBSegError):
    pass


class InvalidAnnotationError(NBSegError, ValueError):
    def __init__(self, message, index=None):
        self.index = index
        if index is not None:
            message = f"polygon {index}: {message}"
        super().__init__(message)


class InvalidMaskError(NBSegError, ValueError):
    def __init__(self, message, row=None, col=None):
        self.row = row
        self.col = col
        if row is not None:
            message = f"{message} at (row={row}, col={col})"
        super().__init__(message)
