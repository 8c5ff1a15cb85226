"""Exception taxonomy shared across the package.

The CLI maps these onto stable exit codes: usage/config problems exit 2,
checkpoint problems exit 3, file/corpus I/O exits 4, numeric aborts exit 5.
"""


class StyletokError(Exception):
    """Base class for all package errors."""


class ShapeError(StyletokError):
    """Tensor shapes incompatible with the requested operation."""


class NumericError(StyletokError):
    """A non-finite value appeared where only finite values are legal."""


class ConfigError(StyletokError):
    """Bad configuration, style spec, or argument value."""


class CheckpointError(StyletokError):
    """Unreadable or inconsistent checkpoint file."""


class DataError(StyletokError):
    """Corpus or audio files missing, malformed, or inconsistent."""
