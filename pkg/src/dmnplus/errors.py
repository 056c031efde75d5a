"""Exception types raised across the package."""


class DMNError(Exception):
    """Base class for all errors raised by dmnplus."""


class ShapeError(DMNError, ValueError):
    """Operand shapes are incompatible."""


class RankError(ShapeError):
    """An operand has the wrong number of dimensions."""


class VocabularyError(DMNError, IndexError):
    pass


class InputError(DMNError, ValueError):
    """Empty or otherwise unusable model input."""


class ConfigError(DMNError, ValueError):
    pass


class FormatError(DMNError, ValueError):
    """A file on disk does not match its declared format."""


class ParseError(DMNError, ValueError):
    def __init__(self, message: str, line_no: int | None = None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


class SpecError(DMNError, ValueError):
    """A task specification cannot be satisfied."""


class TrainingFault(DMNError, RuntimeError):
    """Numerical failure during training (non-finite loss or gradient)."""
