"""
Exception hierarchy shared by the model stack, planner and harness.
"""

from typing import Dict, Optional


class SarError(Exception):
    """Base class for every error raised by this project."""


class ArgumentError(SarError, ValueError):
    pass


class RasterFormatError(SarError, ValueError):
    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", column {column})" if column is not None else ")")
        super().__init__(f"{message}{where}")
        self.line = line
        self.column = column


class ModelError(SarError, ValueError):
    pass


class NumericalError(SarError, RuntimeError):
    def __init__(self, message: str, diagnostics: Optional[Dict] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class UsageError(SarError, RuntimeError):
    pass


class ConfigError(SarError, ValueError):
    pass


class EpisodeError(SarError, RuntimeError):
    pass
