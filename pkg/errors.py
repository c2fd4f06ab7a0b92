"""
Exception hierarchy shared by the library and the command line
"""

from typing import Optional


class ImpnovoError(Exception):
    """Base class for all sequencer errors"""

    exit_code = 3


class VocabularyError(ImpnovoError):
    """Unknown symbol, or a stop token where a residue is required"""


class DomainError(ImpnovoError):
    """An operation was called outside its precondition"""


class ConfigError(ImpnovoError):
    exit_code = 1


class UsageError(ConfigError):
    """Bad command line"""


class DataError(ImpnovoError):
    """Malformed or unreadable input data"""

    exit_code = 2


class MgfParseError(DataError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class EmptySpectrumError(DataError):
    """Preprocessing removed every peak"""


class AssignmentError(ImpnovoError):
    """More targets than queries reached the matcher"""


class DivergenceError(ImpnovoError):
    """Non-finite training loss"""

    def __init__(self, message: str, step: int, last_good: Optional[str] = None):
        self.step = step
        self.last_good = last_good
        super().__init__(message)


class CheckpointError(ImpnovoError):
    pass
