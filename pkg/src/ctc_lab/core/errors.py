"""
Exception hierarchy shared by every CTC Lab module.
"""
from typing import Optional


class CtcLabError(Exception):
    """Base exception for CTC Lab errors."""

    exit_code = 1


class DimensionError(CtcLabError):
    """Raised when array shapes do not chain or match."""
    pass


class NumericError(CtcLabError):
    """Raised when a value becomes non-finite or a normalization degenerates."""
    pass


class RangeError(CtcLabError):
    """Raised when an argument falls outside its admissible range."""
    pass


class ContractError(CtcLabError):
    """Raised when an input violates a documented precondition."""
    pass


class SampleIndexError(CtcLabError, IndexError):
    """Raised when a label or sample id is out of range."""
    pass


class StateError(CtcLabError):
    """Raised when an object is used in the wrong lifecycle state."""
    pass


class DataError(CtcLabError):
    """Raised when a data set is too small or otherwise unusable."""
    pass


class DegenerateError(CtcLabError):
    """Raised when data carries no variation to work with."""
    pass


class MineDivergenceError(NumericError):
    """Raised when the MINE statistics network produces a non-finite value."""
    pass


class UsageError(CtcLabError):
    """Raised for invalid command-line usage."""

    exit_code = 2


class ParseError(CtcLabError):
    """Raised when an input file cannot be parsed."""

    exit_code = 2

    def __init__(self, message: str, line: Optional[int] = None, path: Optional[str] = None):
        self.line = line
        self.path = path
        location = ""
        if path is not None:
            location += f"{path}"
        if line is not None:
            location += f"{':' if location else ''}line {line}"
        super().__init__(f"{location}: {message}" if location else message)


class ConfigFileError(ParseError):
    """Raised when an experiment config file or override is invalid."""

    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None,
                 path: Optional[str] = None):
        self.key = key
        if key is not None:
            message = f"{message} (key '{key}')"
        super().__init__(message, line=line, path=path)


class TrainingDivergedError(NumericError):
    """Raised when a training loss turns non-finite."""

    def __init__(self, message: str, epoch: int, last_checkpoint: Optional[str] = None):
        self.epoch = epoch
        self.last_checkpoint = last_checkpoint
        super().__init__(
            f"{message} at epoch {epoch}; last good checkpoint: {last_checkpoint or 'none'}"
        )
