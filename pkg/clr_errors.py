"""
Error categories
================
Every failure the library raises on purpose is a ``ClrError``. The category
and exit code travel with the exception so the command line can report it
without guessing.
"""

from typing import List, Optional


class ClrError(Exception):
    """Base class for all expected failures."""

    category = "error"
    exit_code = 1


class UsageError(ClrError):
    """Bad parameters or configuration supplied by the caller."""

    category = "usage"
    exit_code = 2


class InvalidArgumentError(UsageError, ValueError):
    """An argument has the wrong shape, range or type."""

    category = "invalid-argument"


class DataValidationError(ClrError):
    """Input data violates the matched case-control data model."""

    category = "data-validation"
    exit_code = 3

    def __init__(self, message: str, violations: Optional[List[str]] = None):
        super().__init__(message)
        self.violations = list(violations or [])


class NumericalError(ClrError):
    """A fit or search failed to produce a usable numerical answer."""

    category = "numerical"
    exit_code = 4
