"""
errors.py - Exception hierarchy for chart extraction

Every error raised on purpose by the package derives from ExtractionError.
The command-line interface maps the three families onto exit codes.
"""


class ExtractionError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class UsageError(ExtractionError, ValueError):
    """Bad arguments, unknown config keys, or an unusable combination of options."""

    exit_code = 1


class DataError(ExtractionError):
    """Input data could not be read or violates a data contract."""

    exit_code = 2


class AnnotationError(DataError, ValueError):
    """An annotation file is malformed or uses an unknown label."""

    def __init__(self, message, path=None):
        self.path = path
        if path is not None:
            message = f"{path}: {message}"
        super().__init__(message)


class GeometryError(DataError, ValueError):
    """A box or warp is degenerate or lies outside its image."""


class LayoutError(DataError, ValueError):
    """The synthetic generator cannot place the mandatory chart elements."""


class CharsetError(DataError, ValueError):
    """A transcript contains characters the recognizer cannot emit."""

    def __init__(self, message, offenders=()):
        self.offenders = list(offenders)
        super().__init__(message)


class ModelError(ExtractionError):
    """A model is missing, untrained, or incompatible with its input."""

    exit_code = 3


class BundleError(ModelError):
    """A parameter bundle failed version, checksum, or consistency checks."""
