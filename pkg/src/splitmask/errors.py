"""Exception hierarchy shared by every module."""


class SplitMaskError(Exception):
    """Base class for all package errors."""


class ShapeError(SplitMaskError, ValueError):
    """Input tensors do not fit the operation contract."""


class SchemeGenerationError(SplitMaskError):
    """A usable coding scheme could not be drawn within the retry cap."""


class IncompleteBatchError(SplitMaskError):
    """A result or equation for some encoding index is missing."""


class IntegrityNotEnabledError(SplitMaskError):
    """Verification was requested on a scheme without extension columns."""


class IntegrityError(SplitMaskError):
    """Raised when a verdict fails under the ``abort`` policy."""

    def __init__(self, message, verdict=None):
        super().__init__(message)
        self.verdict = verdict


class InsufficientWorkersError(SplitMaskError):
    pass


class WorkerTimeoutError(SplitMaskError):
    pass


class StaleWeightsError(SplitMaskError):
    pass


class NonFiniteLossError(SplitMaskError, FloatingPointError):
    pass


class IngestionError(SplitMaskError, ValueError):
    """Malformed dataset file. ``offset`` is the byte offset of the problem."""

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class ConfigError(SplitMaskError, ValueError):
    pass
