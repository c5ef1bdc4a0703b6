"""Exception hierarchy shared by every module."""


class NSRError(Exception):
    """Base class for all package errors."""


class ArgumentError(NSRError, ValueError):
    """An argument is outside its documented domain."""


class DimensionError(NSRError, ValueError):
    """Tensor extents do not compose."""


class StateError(NSRError, RuntimeError):
    """Recorded state does not belong to the object it is used with."""


class ContractError(NSRError, RuntimeError):
    """A caller broke an interface contract (e.g. a malformed loss graph)."""


class InputError(NSRError, ValueError):
    """Input data is unusable, e.g. non-finite."""


class IngestionError(NSRError, ValueError):
    """A heartbeat CSV failed validation.

    ``rows`` holds the 1-based numbers of (at most ten) offending rows.
    """

    def __init__(self, message, rows=()):
        super().__init__(message)
        self.rows = list(rows)


class PersistenceError(NSRError, IOError):
    """Base class for model file problems."""


class FormatVersionError(PersistenceError):
    pass


class ChecksumError(PersistenceError):
    pass


class MalformedModelError(PersistenceError):
    pass


class TrainingError(NSRError, RuntimeError):
    """Training could not continue.

    ``checkpoint`` is the path of the last good checkpoint, if one was written.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
