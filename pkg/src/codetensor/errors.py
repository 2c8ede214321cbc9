"""Exception hierarchy.

Every error raised by the package derives from :class:`CodeTensorError`.
The ``exit_code`` attribute is what the command line front end returns
when the error escapes a command.
"""


class CodeTensorError(Exception):
    exit_code = 1


class ConfigError(CodeTensorError, ValueError):
    exit_code = 2


class DataError(CodeTensorError, ValueError):
    exit_code = 3


class EmptyBinary(DataError):
    pass


class FormatError(DataError):
    pass


class IoError(DataError, OSError):
    pass


class DegenerateBand(DataError):
    pass


class ImageTooSmall(DataError):
    pass


class DimError(DataError):
    pass


class ShapeError(DataError):
    pass


class RankError(DataError):
    pass


class NoSegments(DataError):
    pass


class NoSamples(DataError):
    pass


class SplitError(DataError):
    pass


class DegenerateLabels(DataError):
    pass


class NotFitted(CodeTensorError, RuntimeError):
    exit_code = 3


class BuildError(CodeTensorError, ValueError):
    exit_code = 2


class LayerError(CodeTensorError, IndexError):
    exit_code = 2


class TrainingDiverged(CodeTensorError, RuntimeError):
    """Raised when a loss turns non-finite.

    ``state`` carries the last parameters for which every loss was finite.
    """

    exit_code = 4

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class StageError(CodeTensorError):
    """Wraps a failure inside a pipeline stage with stage/sample context."""

    def __init__(self, stage, sample, cause):
        where = f"stage {stage!r}" + (f", sample {sample!r}" if sample else "")
        super().__init__(f"{where}: {cause}")
        self.stage = stage
        self.sample = sample
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
