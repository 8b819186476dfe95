"""Exception types shared across the package.

The CLI maps the four families below onto exit codes 1-4.
"""


class PDRError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class ConfigError(PDRError):
    """Malformed or inconsistent architecture / training configuration."""

    exit_code = 1


class DimensionError(ConfigError, ValueError):
    """A tensor or layer shape does not satisfy an operation's contract.

    ``axis`` names the offending axis (``"channels"``, ``"height"``, ...) and
    ``where`` optionally locates the layer, e.g. ``"branch 2, layer 3"``.
    """

    def __init__(self, message, axis=None, where=None):
        self.axis = axis
        self.where = where
        parts = [message]
        if axis is not None:
            parts.append(f"axis={axis}")
        if where is not None:
            parts.append(f"at {where}")
        super().__init__(" | ".join(parts))


class ContractError(ConfigError, ValueError):
    """Arguments violate a documented precondition (e.g. routing iterations < 1)."""


class InvalidStateError(PDRError, RuntimeError):
    """Backward was requested without the matching forward cache."""


class DegenerateBatchError(PDRError, ValueError):
    """Batch statistics are undefined (a single element per channel)."""


class DataError(PDRError):
    exit_code = 2


class FormatError(DataError, ValueError):
    """File content does not follow the expected binary layout."""


class TruncationError(FormatError):
    """File ends before the declared payload."""


class CountMismatchError(DataError, ValueError):
    """Image and label files disagree on the sample count."""


class DivergenceError(PDRError, FloatingPointError):
    """Training produced a non-finite loss or gradient."""

    exit_code = 3


class CheckpointError(PDRError):
    exit_code = 4


class BadMagicError(CheckpointError, ValueError):
    pass


class VersionMismatchError(CheckpointError, ValueError):
    pass


class CheckpointTruncatedError(CheckpointError, ValueError):
    pass


class CheckpointMismatchError(ConfigError):
    """Checkpoint tensors do not fit the requested architecture."""
