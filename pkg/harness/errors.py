from dataclasses import dataclass

class AVSError(Exception):
    """
    Root of the errors raised by the segmentation pipeline.
    """


class ConfigError(AVSError, ValueError):
    """
    Invalid, unknown or mutually inconsistent configuration values.
    """


class CheckpointError(AVSError):
    """
    A checkpoint cannot be resumed or evaluated with the given configuration.
    """


class DatasetError(AVSError):
    """
    A dataset directory is unreadable as a whole (for example a malformed index).
    """


class NumericalError(AVSError, FloatingPointError):
    """
    A computation produced non-finite values or failed to reach a valid state.

    Attributes:
    - step: optional index of the step at which the failure happened
    """
    def __init__(self, message:str, step:int = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


@dataclass(frozen=True)
class ClipLoadError:
    """
    Record of a clip that could not be loaded. Loaders yield it in place of the
    clip and carry on with the next one.

    Attributes:
    - clip_id: id of the clip as listed in the index
    - reason: human readable cause
    """
    clip_id: str
    reason: str
