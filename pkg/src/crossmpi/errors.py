"""Exception types shared across the package.

Invalid arguments to numerical operations raise the builtin ``ValueError``;
the classes below cover failures with an external cause (files, schedules,
checkpoints) so callers can tell them apart.
"""


class CrossMPIError(Exception):
    """Base class for package-specific errors."""


class ParseError(CrossMPIError):
    """A text input (sequence file, calibration file, config) is malformed."""


class DataError(CrossMPIError):
    """A dataset directory or image pair is missing or inconsistent."""


class CheckpointError(CrossMPIError):
    """A checkpoint file cannot be read, or does not match the model."""


class ScheduleError(CrossMPIError):
    """A training stage was started without its prerequisites."""


class TrainingDiverged(CrossMPIError):
    """A non-finite loss was encountered; carries the diagnostic dump path."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
