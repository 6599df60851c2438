"""Exception taxonomy shared across the package.

The CLI maps each class to a distinct exit code, so keep the hierarchy flat
and specific.
"""


class QeftError(Exception):
    """Base class for all package errors."""


class ConfigError(QeftError):
    """Invalid model or run configuration (bad dimension relations, bad flags)."""


class ShapeError(QeftError):
    """Array arguments whose shapes do not satisfy an operation's contract."""


class DivergenceError(QeftError):
    """Training hit a non-finite loss. Carries the last finite-state model."""

    def __init__(self, message, last_good=None, step=None):
        super().__init__(message)
        self.last_good = last_good
        self.step = step


class ContainerError(QeftError):
    """Base class for checkpoint container failures."""


class BadMagicError(ContainerError):
    """File does not start with the container magic."""


class UnsupportedVersionError(ContainerError):
    """Container version not understood by this reader."""


class TruncatedFileError(ContainerError):
    """File ends before a declared record or the checksum."""


class ChecksumError(ContainerError):
    """Stored CRC32 does not match the file contents."""


class MergeMismatchError(QeftError):
    """Merge arguments disagree (fingerprint, frozen payloads, or index sets)."""
