class ITIDError(Exception):
    """Base class for every error raised by the pipeline"""


class DimensionError(ITIDError, ValueError):
    """Shapes that cannot be combined, or a tensor that does not fit its slot"""


class GeometryError(DimensionError):
    """Box geometry that an operation cannot use (e.g. zero-width key box)"""


class NumericalError(ITIDError, ArithmeticError):
    """A NaN or Inf appeared where only finite values are legal"""


class ConfigError(ITIDError, ValueError):
    """Unknown configuration key or a value of the wrong type"""


class CheckpointError(ITIDError):
    """A checkpoint file is missing or does not match the model"""


class AnnotationFormatError(ITIDError, ValueError):
    """A malformed line in an annotation or prior-table file"""

    def __init__(self, message: str, line_number: int) -> None:
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class UsageError(ITIDError):
    """Bad command-line arguments or an output directory the command may not use"""
