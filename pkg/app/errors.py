class ToolkitError(Exception):
    """Base error; `exit_code` is what the CLI returns for this category."""

    exit_code = 1


class ConfigError(ToolkitError):
    exit_code = 2


class DataError(ToolkitError):
    exit_code = 3


class ShapeError(DataError, ValueError):
    """Operands or files whose extents do not line up."""


class NumericError(ToolkitError):
    exit_code = 4


class DegenerateSignatureError(NumericError):
    """A signature that is undefined for the given input (zero LF energy, empty attention)."""


class TrainingDiverged(NumericError):
    def __init__(self, message: str, checkpoint=None):
        super().__init__(message)
        # last weights whose loss was still finite
        self.checkpoint = checkpoint
