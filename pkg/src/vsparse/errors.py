"""Exception types shared across the package.

The CLI maps these onto process exit codes, so raising the right class
matters more than the message text: usage/config problems exit 1, data
format problems exit 2 and numeric failures exit 3.
"""


class VsparseError(Exception):
    """Base class for all package-specific errors."""


class UsageError(VsparseError):
    """Invalid arguments or an API called with inconsistent inputs."""


class ConfigError(UsageError):
    """A configuration value is unknown, malformed or out of range."""


class ShapeError(UsageError):
    """Tensor or array dimensions do not line up."""


class FormatError(VsparseError):
    """A file does not follow its on-disk format.

    ``offset`` carries the byte offset of the offending record when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class GenerationError(VsparseError):
    """The synthetic scene sampler could not satisfy its constraints."""


class NumericError(VsparseError):
    """A computation produced NaN/Inf or failed a numeric check."""


class StaleTapeError(NumericError):
    """backward() was called twice on the same computation graph."""
