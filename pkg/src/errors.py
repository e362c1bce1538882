"""Exception hierarchy shared by every memsde module.

All errors raised on purpose derive from ``MemSDEError`` so the command line
front end can tell a failed run (exit 1) from a failed theory check (exit 2).
"""
from dataclasses import dataclass
from typing import List, Optional


class MemSDEError(Exception):
    """Base class for errors raised by memsde."""


class ParameterError(MemSDEError, ValueError):
    """A numeric argument is outside its admissible range."""


class HistoryError(MemSDEError):
    """Invalid operation on a past history or a path record."""


class DriftError(MemSDEError):
    """Unknown drift family, bad parameters or missing kernel registration."""


class EstimationError(MemSDEError):
    """Sampler contract violated, empty measures or too few samples."""


class IntegrationError(MemSDEError):
    """The Euler-Maruyama recursion produced a non-finite or exploding state."""

    def __init__(self, message: str, last_finite_index: int = -1,
                 trajectory_index: Optional[int] = None):
        super().__init__(message)
        self.last_finite_index = last_finite_index
        self.trajectory_index = trajectory_index


@dataclass(frozen=True)
class FieldError:
    path: str
    message: str

    def __str__(self):
        return f"{self.path}: {self.message}"


class ConfigError(MemSDEError):
    """Config text could not be parsed or failed validation.

    ``errors`` lists every field-level problem; ``line`` is set for syntax errors.
    """

    def __init__(self, errors: List[FieldError], line: Optional[int] = None):
        self.errors = list(errors)
        self.line = line
        summary = "; ".join(str(e) for e in self.errors)
        if line is not None:
            summary = f"line {line}: {summary}"
        super().__init__(summary)
