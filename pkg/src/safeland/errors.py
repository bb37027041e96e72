"""Exception types raised across the pipeline."""


class SafeLandError(Exception):
    """Base class for all pipeline errors."""


class OutOfRangeError(SafeLandError, ValueError):
    pass


class InsufficientDataError(SafeLandError, ValueError):
    pass


class DegenerateGeometryError(SafeLandError, ValueError):
    pass


class BehindCameraError(SafeLandError, ValueError):
    pass


class InvalidDepthError(SafeLandError, ValueError):
    pass


class EmptyIntervalError(SafeLandError, ValueError):
    pass


class InvalidPoseError(SafeLandError, ValueError):
    pass


class EmptyInputError(SafeLandError, ValueError):
    """Raised when an operation needs at least one valid sample and got none."""


class DegenerateWarpError(SafeLandError, ValueError):
    """No pixel survived a view warp."""


class NoInputError(SafeLandError, ValueError):
    pass


class StreamExhaustedError(SafeLandError, RuntimeError):
    pass


class ExcessiveTiltError(SafeLandError, ValueError):
    pass


class InvalidCenterError(SafeLandError, ValueError):
    pass


class InvalidTransitionError(SafeLandError, ValueError):
    pass


class ConfigError(SafeLandError, ValueError):
    pass


class IngestionError(SafeLandError, IOError):
    def __init__(self, message, path=None):
        super().__init__(f"{path}: {message}" if path is not None else message)
        self.path = path


class SchemaError(SafeLandError, ValueError):
    def __init__(self, message, path=None, row=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if row is not None:
                where += f" row {row}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.row = row


class OptimizerStallError(SafeLandError, RuntimeError):
    """The line search failed repeatedly; ``best`` carries the lowest-cost iterate."""

    def __init__(self, message, best=None, best_cost=None):
        super().__init__(message)
        self.best = best
        self.best_cost = best_cost
