"""Exception hierarchy shared by every module."""


class SpotError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(SpotError, ValueError):
    pass


class ShapeMismatchError(SpotError, ValueError):
    pass


class ZeroNormError(SpotError, ValueError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class EmptyRunListError(SpotError, ValueError):
    pass


class EmptyListError(SpotError, ValueError):
    pass


# --- checkpoint / library formats -------------------------------------------


class FormatError(SpotError, ValueError):
    """A checkpoint file failed to parse; ``offset`` is the failing byte offset."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class PathExistsError(SpotError, FileExistsError):
    pass


class SchemaError(SpotError, ValueError):
    pass


class DuplicateEntryError(SpotError, ValueError):
    pass


class MissingFileError(SpotError, FileNotFoundError):
    pass


# --- retrieval ----------------------------------------------------------------


class EmptyLibraryError(SpotError, ValueError):
    pass


class KOutOfRangeError(SpotError, ValueError):
    pass


class EmptySizesError(SpotError, ValueError):
    pass


class MissingDatasetError(SpotError, KeyError):
    pass


# --- toy tuner ----------------------------------------------------------------


class TopNOutOfRangeError(SpotError, ValueError):
    pass


class TokenIdOutOfRange(SpotError, ValueError):
    pass


class EmptyBatchError(SpotError, ValueError):
    pass


class NoCheckpointsError(SpotError, ValueError):
    pass


class StepNotCheckpointedError(SpotError, KeyError):
    pass


class EmptySplitError(SpotError, ValueError):
    pass


# --- analysis -----------------------------------------------------------------


class BaselinePerfectError(SpotError, ValueError):
    pass


class DegenerateVarianceError(SpotError, ValueError):
    pass


class LengthMismatchError(SpotError, ValueError):
    pass


class AsymmetricInputError(SpotError, ValueError):
    pass


class ConfigError(SpotError, ValueError):
    pass
