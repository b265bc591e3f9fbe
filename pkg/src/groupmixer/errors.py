"""Exception types shared across the package."""


class GroupMixerError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(GroupMixerError, ValueError):
    """Tensor shapes or divisibility constraints are violated."""


class UsageError(GroupMixerError, RuntimeError):
    """An API was called in a state where the call is not meaningful."""


class ConfigError(GroupMixerError, ValueError):
    pass


class CheckpointError(GroupMixerError):
    """A checkpoint could not be read back.

    ``field`` names the part of the file that failed validation.
    """

    def __init__(self, message: str, field: str | None = None):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


class DatasetError(GroupMixerError):
    pass


class MissingDirectoryError(DatasetError, FileNotFoundError):
    pass


class EmptyDatasetError(DatasetError):
    pass


class ImageDecodeError(DatasetError):
    def __init__(self, path, reason: str = ""):
        msg = f"cannot decode image {path}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)
        self.path = str(path)


class DivergenceError(GroupMixerError, FloatingPointError):
    """Training produced a non-finite loss.

    ``checkpoint`` holds the path of the last good checkpoint, if one was written.
    """

    def __init__(self, message: str, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
