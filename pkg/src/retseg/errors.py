"""Exception hierarchy shared by all modules."""


class RetSegError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(RetSegError, ValueError):
    """Operand shapes are incompatible; the message names the offending dimension."""


class ParameterError(RetSegError, ValueError):
    """A scalar hyperparameter is outside its valid range."""


class UsageError(RetSegError, RuntimeError):
    """An API was called in a state it does not support (e.g. non-scalar loss)."""


class ConfigError(RetSegError, ValueError):
    """Invalid model/train configuration or config-file syntax."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class CheckpointError(RetSegError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class DataError(RetSegError):
    """Dataset layout problems: missing files, unmatched masks, empty manifests."""


class DecodeError(DataError):
    """An image file exists but could not be decoded."""
