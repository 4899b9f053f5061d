"""Exception types shared across the pipeline."""

from typing import Optional


class PhenoError(Exception):
    """Base class for all pheno-ml errors."""


class ConfigError(PhenoError):
    """Invalid run configuration or command-line usage."""


class DataError(PhenoError, ValueError):
    """Input data violates an operation's contract."""


class IngestionError(DataError):
    """A file could not be parsed into a table."""

    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None):
        super().__init__(message)
        self.row = row
        self.column = column


class EmptyTableError(DataError):
    """Filtering left nothing to work with."""


class FitError(PhenoError):
    """A model fit failed."""

    def __init__(self, message: str, iteration: Optional[int] = None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration


class CapacityError(PhenoError):
    """Network architecture exceeds the configured weight cap."""
